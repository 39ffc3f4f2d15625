//! Four-stage video analytics pipeline: generator → motion detection →
//! face detection → face recognition, with synthetic frames.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use thiserror::Error;

use crate::runtime::{DuplicateHandler, Handler, HandlerContext, HandlerError, HandlerOutput, HandlerRegistry};
use crate::storage::DataObject;

pub const GENERATOR: &str = "video_generator";
pub const MOTION: &str = "motion_detect";
pub const DETECT: &str = "face_detect";
pub const RECOGNIZE: &str = "face_recognize";

/// Data names the pipeline's handlers emit.
pub const CHUNK: &str = "gop";
pub const FRAMES: &str = "frames";
pub const HAS_FACE: &str = "has_face";
pub const NO_FACE: &str = "no_face";
pub const FACES: &str = "faces";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VideoCosts {
    pub generator: Duration,
    pub motion: Duration,
    pub detect: Duration,
    pub recognize: Duration,
}

impl Default for VideoCosts {
    fn default() -> Self {
        VideoCosts {
            generator: Duration::from_millis(2),
            motion: Duration::from_millis(8),
            detect: Duration::from_millis(10),
            recognize: Duration::from_millis(25),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VideoParams {
    pub fps: u32,
    /// Frames per generated chunk (group of pictures).
    pub chunk_frames: u32,
    pub frame_bytes: usize,
    pub motion_pass_p: f64,
    pub face_pass_p: f64,
    pub costs: VideoCosts,
}

impl Default for VideoParams {
    fn default() -> Self {
        VideoParams {
            fps: 10,
            chunk_frames: 10,
            frame_bytes: 64 * 1024,
            motion_pass_p: 0.45,
            face_pass_p: 0.40,
            costs: VideoCosts::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid video parameters: {0}")]
pub struct InvalidVideoParams(pub String);

impl VideoParams {
    pub fn validate(&self) -> Result<(), InvalidVideoParams> {
        for (name, p) in [("motion_pass_p", self.motion_pass_p), ("face_pass_p", self.face_pass_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(InvalidVideoParams(format!("{name} = {p} is not a probability")));
            }
        }
        if self.fps == 0 || self.chunk_frames == 0 || self.frame_bytes == 0 {
            return Err(InvalidVideoParams(
                "fps, chunk_frames and frame_bytes must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Share of frames expected to reach recognition.
    pub fn reach_ratio(&self) -> f64 {
        self.motion_pass_p * self.face_pass_p
    }

    /// Time between chunks of one stream.
    pub fn chunk_interval(&self) -> Duration {
        Duration::from_secs_f64(f64::from(self.chunk_frames) / f64::from(self.fps))
    }

    pub fn chunk_bytes(&self) -> usize {
        self.chunk_frames as usize * self.frame_bytes
    }
}

fn frames_in(inputs: &[DataObject], frame_bytes: usize) -> Result<usize, HandlerError> {
    let obj = inputs.first().ok_or_else(|| HandlerError("no input frames".into()))?;
    Ok(obj.bytes.len() / frame_bytes)
}

/// Keeps each of `n` frames with probability `p`; returns the survivors.
fn sample(ctx: &HandlerContext, n: usize, p: f64) -> usize {
    let mut rng = ctx.rng();
    (0..n).filter(|_| rng.random_bool(p)).count()
}

fn synthetic_frames(n: usize, frame_bytes: usize, tag: u8) -> Vec<u8> {
    vec![tag; n * frame_bytes]
}

pub fn generator(params: VideoParams) -> Arc<dyn Handler> {
    Arc::new(move |ctx: &HandlerContext, _: &[DataObject]| {
        let tag = ctx.rng().random::<u8>();
        Ok(HandlerOutput::new(params.costs.generator).with_object(
            CHUNK,
            synthetic_frames(params.chunk_frames as usize, params.frame_bytes, tag),
        ))
    })
}

/// Passes each frame with `motion_pass_p`; a chunk without motion ends the
/// request.
pub fn motion(params: VideoParams) -> Arc<dyn Handler> {
    Arc::new(move |ctx: &HandlerContext, inputs: &[DataObject]| {
        let n = frames_in(inputs, params.frame_bytes)?;
        let kept = sample(ctx, n, params.motion_pass_p);
        let out = HandlerOutput::new(params.costs.motion);
        Ok(if kept == 0 {
            out
        } else {
            out.with_object(FRAMES, synthetic_frames(kept, params.frame_bytes, 1))
        })
    })
}

/// Passes each frame with `face_pass_p` and names the output by outcome, so
/// the graph can branch on it.
pub fn detect(params: VideoParams) -> Arc<dyn Handler> {
    Arc::new(move |ctx: &HandlerContext, inputs: &[DataObject]| {
        let n = frames_in(inputs, params.frame_bytes)?;
        let kept = sample(ctx, n, params.face_pass_p);
        let out = HandlerOutput::new(params.costs.detect);
        Ok(if kept == 0 {
            out.with_object(NO_FACE, Vec::new())
        } else {
            out.with_object(HAS_FACE, synthetic_frames(kept, params.frame_bytes, 2))
        })
    })
}

pub fn recognize(params: VideoParams) -> Arc<dyn Handler> {
    Arc::new(move |ctx: &HandlerContext, inputs: &[DataObject]| {
        let n = frames_in(inputs, params.frame_bytes)?;
        let result = serde_json::json!({
            "invocation": ctx.invocation_id,
            "faces": n,
            "identity": ctx.rng().random_range(0..1000u32),
        });
        Ok(HandlerOutput::new(params.costs.recognize)
            .with_object(FACES, result.to_string().into_bytes())
            .with_label("faces", n.to_string()))
    })
}

pub fn register(handlers: &mut HandlerRegistry, params: VideoParams) -> Result<(), DuplicateHandler> {
    handlers.register(GENERATOR, generator(params))?;
    handlers.register(MOTION, motion(params))?;
    handlers.register(DETECT, detect(params))?;
    handlers.register(RECOGNIZE, recognize(params))
}

/// Function names of the shipped video bundle.
pub mod functions {
    pub const GENERATOR: &str = "generator";
    pub const MOTION: &str = "motion_detection";
    pub const DETECT: &str = "face_detection";
    pub const RECOGNIZE: &str = "face_recognition";
}

/// Named tier assignments for the video pipeline.
pub fn placement_presets() -> Vec<(&'static str, BTreeMap<String, String>)> {
    use functions::*;
    let preset = |detect: &str, recognize: &str| {
        [
            (GENERATOR, "iot"),
            (MOTION, "iot"),
            (DETECT, detect),
            (RECOGNIZE, recognize),
        ]
        .into_iter()
        .map(|(f, t)| (f.to_string(), t.to_string()))
        .collect::<BTreeMap<_, _>>()
    };
    vec![
        ("iot-edge", preset("edge", "edge")),
        ("iot-cloud", preset("cloud", "cloud")),
        ("three-tiers", preset("edge", "cloud")),
    ]
}
