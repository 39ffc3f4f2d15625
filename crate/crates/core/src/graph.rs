//! Workflow graphs assembled from function templates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::kv;
use crate::template::{parse_template, FunctionTemplate, NextSpec, TemplateError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("workflow has no functions")]
    Empty,
    #[error("function `{0}` declared twice")]
    DuplicateFunction(String),
    #[error("`{from}` names unknown successor `{to}`")]
    UnknownSuccessor { from: String, to: String },
    #[error("cycle detected: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("multiple entry functions: {}", .0.join(", "))]
    MultipleEntries(Vec<String>),
    #[error("unreachable from entry: {}", .0.join(", "))]
    Unreachable(Vec<String>),
    #[error("function `{0}` is not part of the workflow")]
    UnknownFunction(String),
    #[error("`{from}` produced `{data_name}`, which matches no declared branch")]
    NoBranchMatch { from: String, data_name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum LogicKind {
    Pipeline,
    OneToMany,
    Branching,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkflowKind {
    pub logic: LogicKind,
    pub cron_wrapped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub from: String,
    pub branch: u32,
    pub to: NextSpec,
}

/// A validated, immutable workflow DAG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowGraph {
    name: String,
    nodes: BTreeMap<String, FunctionTemplate>,
    entry: String,
    kind: WorkflowKind,
    edges: Vec<Edge>,
}

/// A storage-chain mismatch on one edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Warning {
    pub from: String,
    pub to: String,
    pub message: String,
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}: {}", self.from, self.to, self.message)
    }
}

fn classify(nodes: &BTreeMap<String, FunctionTemplate>) -> LogicKind {
    let mut fan_out = false;
    let mut branching = false;
    for t in nodes.values() {
        // Indexed outputs choose among branches even when only one of them
        // has a successor.
        if t.is_branching() && t.outputs.len() > 1 {
            branching = true;
            continue;
        }
        if t.nexts.len() <= 1 {
            continue;
        }
        let indices: BTreeSet<u32> = t.nexts.iter().map(|(i, _)| *i).collect();
        // Several successors sharing one index (0 or a branch) fan out.
        if indices.len() > 1 {
            branching = true;
        } else {
            fan_out = true;
        }
    }
    match (fan_out, branching) {
        (false, false) => LogicKind::Pipeline,
        (true, false) => LogicKind::OneToMany,
        (false, true) => LogicKind::Branching,
        (true, true) => LogicKind::Mixed,
    }
}

fn find_cycle(nodes: &BTreeMap<String, FunctionTemplate>) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Fresh,
        Active,
        Done,
    }
    fn visit<'a>(
        name: &'a str,
        nodes: &'a BTreeMap<String, FunctionTemplate>,
        marks: &mut BTreeMap<&'a str, Mark>,
        stack: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        marks.insert(name, Mark::Active);
        stack.push(name);
        for (_, next) in &nodes[name].nexts {
            let to = next.function.as_str();
            match marks[to] {
                Mark::Active => {
                    let start = stack.iter().position(|n| *n == to).unwrap_or(0);
                    let mut path: Vec<String> = stack[start..].iter().map(|s| s.to_string()).collect();
                    path.push(to.to_string());
                    return Some(path);
                }
                Mark::Fresh => {
                    if let Some(path) = visit(to, nodes, marks, stack) {
                        return Some(path);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        marks.insert(name, Mark::Done);
        None
    }

    let mut marks: BTreeMap<&str, Mark> = nodes.keys().map(|k| (k.as_str(), Mark::Fresh)).collect();
    for name in nodes.keys() {
        if marks[name.as_str()] == Mark::Fresh {
            let mut stack = Vec::new();
            if let Some(path) = visit(name, nodes, &mut marks, &mut stack) {
                return Some(path);
            }
        }
    }
    None
}

/// Assembles templates into a validated graph.
pub fn build_graph(name: &str, templates: Vec<FunctionTemplate>) -> Result<WorkflowGraph, GraphError> {
    if templates.is_empty() {
        return Err(GraphError::Empty);
    }
    let mut nodes = BTreeMap::new();
    for t in templates {
        if nodes.contains_key(&t.name) {
            return Err(GraphError::DuplicateFunction(t.name));
        }
        nodes.insert(t.name.clone(), t);
    }

    let mut edges = Vec::new();
    for t in nodes.values() {
        for (branch, next) in &t.nexts {
            if !nodes.contains_key(&next.function) {
                return Err(GraphError::UnknownSuccessor {
                    from: t.name.clone(),
                    to: next.function.clone(),
                });
            }
            edges.push(Edge {
                from: t.name.clone(),
                branch: *branch,
                to: next.clone(),
            });
        }
    }

    if let Some(path) = find_cycle(&nodes) {
        return Err(GraphError::CycleDetected(path));
    }

    let targets: BTreeSet<&str> = edges.iter().map(|e| e.to.function.as_str()).collect();
    let entries: Vec<String> = nodes
        .keys()
        .filter(|n| !targets.contains(n.as_str()))
        .cloned()
        .collect();
    if entries.len() > 1 {
        return Err(GraphError::MultipleEntries(entries));
    }
    // Acyclic and non-empty, so at least one node has no incoming edge.
    let entry = entries.into_iter().next().ok_or(GraphError::Empty)?;

    let mut reached = BTreeSet::new();
    let mut frontier = vec![entry.as_str()];
    while let Some(n) = frontier.pop() {
        if reached.insert(n) {
            frontier.extend(nodes[n].nexts.iter().map(|(_, nx)| nx.function.as_str()));
        }
    }
    let unreachable: Vec<String> = nodes
        .keys()
        .filter(|n| !reached.contains(n.as_str()))
        .cloned()
        .collect();
    if !unreachable.is_empty() {
        return Err(GraphError::Unreachable(unreachable));
    }

    let kind = WorkflowKind {
        logic: classify(&nodes),
        cron_wrapped: nodes[&entry].cron.is_some(),
    };
    Ok(WorkflowGraph {
        name: name.to_string(),
        nodes,
        entry,
        kind,
        edges,
    })
}

impl WorkflowGraph {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn entry(&self) -> &str {
        &self.entry
    }

    pub fn entry_template(&self) -> &FunctionTemplate {
        &self.nodes[&self.entry]
    }

    pub fn kind(&self) -> WorkflowKind {
        self.kind
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, name: &str) -> Option<&FunctionTemplate> {
        self.nodes.get(name)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &FunctionTemplate> {
        self.nodes.values()
    }

    /// Successors to invoke after `from` produced an object named
    /// `produced`. Branching nodes pick the branch whose output data name
    /// matches exactly; a declared branch without successors ends the chain.
    pub fn successors(&self, from: &str, produced: &str) -> Result<Vec<NextSpec>, GraphError> {
        let t = self
            .nodes
            .get(from)
            .ok_or_else(|| GraphError::UnknownFunction(from.to_string()))?;
        if !t.is_branching() {
            return Ok(t.nexts.iter().map(|(_, n)| n.clone()).collect());
        }
        let branch = t
            .output_named(produced)
            .and_then(|o| o.branch)
            .ok_or_else(|| GraphError::NoBranchMatch {
                from: from.to_string(),
                data_name: produced.to_string(),
            })?;
        Ok(t.nexts
            .iter()
            .filter(|(i, _)| *i == branch)
            .map(|(_, n)| n.clone())
            .collect())
    }

    /// Warns for every edge along which the successor's primary input does
    /// not read what the predecessor wrote.
    pub fn validate_storage_chain(&self) -> Vec<Warning> {
        let mut warnings = Vec::new();
        for edge in &self.edges {
            let from = &self.nodes[&edge.from];
            let to = &self.nodes[&edge.to.function];
            let produced = if edge.branch == 0 {
                from.outputs.iter().find(|o| o.branch.is_none())
            } else {
                from.outputs.iter().find(|o| o.branch == Some(edge.branch))
            };
            let message = match (produced, to.primary_input()) {
                (None, _) => Some(format!("`{}` declares no output for this edge", from.name)),
                (Some(_), None) => Some(format!("`{}` declares no input", to.name)),
                (Some(out), Some(input)) if &out.target != input => {
                    Some(format!("output `{}` does not match input `{}`", out.target, input))
                }
                _ => None,
            };
            if let Some(message) = message {
                warnings.push(Warning {
                    from: edge.from.clone(),
                    to: edge.to.function.clone(),
                    message,
                });
            }
        }
        warnings
    }

    /// Returns a copy with every function in `placement` moved to the given
    /// tier, including the `next_tier` entries that point at it.
    pub fn with_placement(&self, placement: &BTreeMap<String, String>) -> Result<WorkflowGraph, GraphError> {
        for f in placement.keys() {
            if !self.nodes.contains_key(f) {
                return Err(GraphError::UnknownFunction(f.clone()));
            }
        }
        let mut g = self.clone();
        for t in g.nodes.values_mut() {
            if let Some(tier) = placement.get(&t.name) {
                t.tier = tier.clone();
            }
            for (_, next) in t.nexts.iter_mut() {
                if let Some(tier) = placement.get(&next.function) {
                    next.tier = tier.clone();
                }
            }
        }
        for e in g.edges.iter_mut() {
            if let Some(tier) = placement.get(&e.to.function) {
                e.to.tier = tier.clone();
            }
        }
        Ok(g)
    }
}

/// Errors reading a workflow bundle directory, tagged with the file.
#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{}: {source}", .path.display(), .source.line().map(|l| l.to_string()).unwrap_or_default())]
    Template { path: PathBuf, source: TemplateError },
    #[error("{}: missing or malformed `workflow: <name>` manifest", .0.display())]
    Manifest(PathBuf),
    #[error("{}: {source}", .path.display())]
    Graph { path: PathBuf, source: GraphError },
}

/// Name of the manifest file inside a bundle directory.
pub const MANIFEST_FILE: &str = "manifest";

/// Templates of a bundle, each with the file it came from.
pub type BundleTemplates = Vec<(PathBuf, FunctionTemplate)>;

/// Reads the manifest and parses every `.fn` file, sorted by file name.
pub fn load_templates(dir: &Path) -> Result<(String, BundleTemplates), Vec<BundleError>> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| vec![BundleError::Io { path, source }]
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&manifest_path).map_err(io(&manifest_path))?;
    let name = kv::parse(&manifest)
        .ok()
        .and_then(|entries| match entries.as_slice() {
            [e] if e.key == "workflow" => Some(e.value.clone()),
            _ => None,
        })
        .ok_or_else(|| vec![BundleError::Manifest(manifest_path.clone())])?;

    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "fn"))
        .collect();
    files.sort();

    let mut templates = Vec::new();
    let mut errors = Vec::new();
    for path in files {
        match fs::read_to_string(&path) {
            Ok(text) => match parse_template(&text) {
                Ok(t) => templates.push((path, t)),
                Err(source) => errors.push(BundleError::Template { path, source }),
            },
            Err(source) => errors.push(BundleError::Io { path, source }),
        }
    }
    if errors.is_empty() {
        Ok((name, templates))
    } else {
        Err(errors)
    }
}

/// Loads a bundle directory into a graph.
pub fn load_bundle(dir: &Path) -> Result<WorkflowGraph, Vec<BundleError>> {
    let (name, templates) = load_templates(dir)?;
    build_graph(&name, templates.into_iter().map(|(_, t)| t).collect()).map_err(|source| {
        vec![BundleError::Graph {
            path: dir.to_path_buf(),
            source,
        }]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::{CronSpec, OutputSpec, StorageRef, SyncMode};

    fn stage(name: &str, input: Option<&str>, output: Option<&str>, nexts: &[&str]) -> FunctionTemplate {
        FunctionTemplate {
            name: name.into(),
            tier: "edge".into(),
            handler: "noop".into(),
            sync: SyncMode::Sync,
            cron: None,
            inputs: input.map(|i| i.parse().unwrap()).into_iter().collect(),
            outputs: output
                .map(|o| OutputSpec::new(None, o.parse().unwrap()))
                .into_iter()
                .collect(),
            nexts: nexts.iter().map(|n| (0, NextSpec::new(*n, "edge"))).collect(),
        }
    }

    fn branching_node() -> FunctionTemplate {
        let mut t = stage("detect", Some("memory://frames"), None, &[]);
        t.outputs = vec![
            OutputSpec::new(Some(1), "memory://has_face".parse().unwrap()),
            OutputSpec::new(Some(2), "memory://no_face".parse().unwrap()),
        ];
        t.nexts = vec![
            (1, NextSpec::new("recognize", "cloud")),
            (2, NextSpec::new("archive", "edge")),
        ];
        t
    }

    #[test]
    fn video_chain_is_pipeline() {
        let g = build_graph(
            "video",
            vec![
                stage("generator", None, Some("memory://gop"), &["motion"]),
                stage(
                    "motion",
                    Some("memory://gop"),
                    Some("memory://frames"),
                    &["face_detect"],
                ),
                stage(
                    "face_detect",
                    Some("memory://frames"),
                    Some("memory://faces"),
                    &["face_recognition"],
                ),
                stage("face_recognition", Some("memory://faces"), None, &[]),
            ],
        )
        .unwrap();
        assert_eq!(g.kind().logic, LogicKind::Pipeline);
        assert!(!g.kind().cron_wrapped);
        assert_eq!(g.entry(), "generator");
        assert!(g.validate_storage_chain().is_empty());
    }

    #[test]
    fn single_cron_function() {
        let mut t = stage("query", None, None, &[]);
        t.cron = CronSpec::new(3000, 1);
        let g = build_graph("q", vec![t]).unwrap();
        assert_eq!(g.kind().logic, LogicKind::Pipeline);
        assert!(g.kind().cron_wrapped);
    }

    #[test]
    fn self_edge_is_cycle() {
        let err = build_graph("c", vec![stage("a", None, None, &["a"]), stage("b", None, None, &[])]).unwrap_err();
        assert_eq!(err, GraphError::CycleDetected(vec!["a".into(), "a".into()]));
    }

    #[test]
    fn structural_errors() {
        let err = build_graph("x", vec![stage("a", None, None, &["zz"])]).unwrap_err();
        assert!(matches!(err, GraphError::UnknownSuccessor { .. }));
        let err = build_graph("x", vec![stage("a", None, None, &[]), stage("a", None, None, &[])]).unwrap_err();
        assert_eq!(err, GraphError::DuplicateFunction("a".into()));
        let err = build_graph("x", vec![stage("a", None, None, &[]), stage("b", None, None, &[])]).unwrap_err();
        assert_eq!(err, GraphError::MultipleEntries(vec!["a".into(), "b".into()]));
        let err = build_graph(
            "x",
            vec![
                stage("a", None, None, &["b"]),
                stage("b", None, None, &["c"]),
                stage("c", None, None, &["b"]),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::CycleDetected(ref p) if p.first() == Some(&"b".to_string())));
        assert_eq!(build_graph("x", vec![]).unwrap_err(), GraphError::Empty);
    }

    #[test]
    fn branch_resolution() {
        let g = build_graph(
            "b",
            vec![
                branching_node(),
                stage("recognize", Some("memory://has_face"), None, &[]),
                stage("archive", Some("memory://no_face"), None, &[]),
            ],
        )
        .unwrap();
        assert_eq!(g.kind().logic, LogicKind::Branching);
        assert_eq!(
            g.successors("detect", "has_face").unwrap(),
            vec![NextSpec::new("recognize", "cloud")]
        );
        assert_eq!(
            g.successors("detect", "no_face").unwrap(),
            vec![NextSpec::new("archive", "edge")]
        );
        assert!(matches!(
            g.successors("detect", "maybe_face"),
            Err(GraphError::NoBranchMatch { .. })
        ));
        assert!(g.successors("recognize", "anything").unwrap().is_empty());
        assert!(g.validate_storage_chain().is_empty());
    }

    #[test]
    fn one_to_many_resolution_and_warnings() {
        let g = build_graph(
            "fan",
            vec![
                stage("src", None, Some("memory://out"), &["a", "b", "c"]),
                stage("a", Some("memory://out"), None, &[]),
                stage("b", Some("memory://out"), None, &[]),
                stage("c", Some("s3://out"), None, &[]),
            ],
        )
        .unwrap();
        assert_eq!(g.kind().logic, LogicKind::OneToMany);
        assert_eq!(g.successors("src", "whatever").unwrap().len(), 3);
        let warnings = g.validate_storage_chain();
        assert_eq!(warnings.len(), 1);
        assert_eq!((warnings[0].from.as_str(), warnings[0].to.as_str()), ("src", "c"));
    }

    #[test]
    fn mismatched_backend_warns() {
        let g = build_graph(
            "m",
            vec![
                stage("a", None, Some("minio://x"), &["b"]),
                stage("b", Some("s3://x"), None, &[]),
            ],
        )
        .unwrap();
        let w = g.validate_storage_chain();
        assert_eq!(w.len(), 1);
        assert!(w[0].message.contains("minio://x"));
    }

    #[test]
    fn placement_rewrites_next_tiers() {
        let g = build_graph(
            "p",
            vec![
                stage("a", None, Some("memory://x"), &["b"]),
                stage("b", Some("memory://x"), None, &[]),
            ],
        )
        .unwrap();
        let placement = BTreeMap::from([("b".to_string(), "cloud".to_string())]);
        let moved = g.with_placement(&placement).unwrap();
        assert_eq!(moved.node("b").unwrap().tier, "cloud");
        assert_eq!(moved.node("a").unwrap().nexts[0].1.tier, "cloud");
        assert_eq!(moved.edges()[0].to.tier, "cloud");
        let bad = BTreeMap::from([("zz".to_string(), "cloud".to_string())]);
        assert!(g.with_placement(&bad).is_err());
    }

    #[test]
    fn mixed_kind() {
        let mut fan = stage("src", None, Some("memory://o"), &["a", "b"]);
        fan.nexts = vec![(0, NextSpec::new("a", "edge")), (0, NextSpec::new("b", "edge"))];
        let mut a = branching_node();
        a.name = "a".into();
        a.inputs = vec![StorageRef::new("memory", "o").unwrap()];
        let g = build_graph(
            "mixed",
            vec![
                fan,
                a,
                stage("b", Some("memory://o"), None, &[]),
                stage("recognize", None, None, &[]),
                stage("archive", None, None, &[]),
            ],
        )
        .unwrap();
        assert_eq!(g.kind().logic, LogicKind::Mixed);
    }
}
