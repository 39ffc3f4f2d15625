//! The two representative workflows as synthetic, cost-parameterized
//! handlers.

pub mod iot;
pub mod video;

use std::sync::Arc;

use crate::runtime::{noop, DuplicateHandler, HandlerRegistry};

pub use iot::{IotParams, IotState};
pub use video::{placement_presets, VideoParams};

/// Registry with every shipped handler plus `noop`.
pub fn standard_handlers(
    video: VideoParams,
    iot: IotParams,
) -> Result<(HandlerRegistry, Arc<IotState>), DuplicateHandler> {
    let mut h = HandlerRegistry::new();
    h.register("noop", noop())?;
    video::register(&mut h, video)?;
    let state = iot::register(&mut h, iot)?;
    Ok((h, state))
}
