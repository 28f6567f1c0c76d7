//! Model persistence: a versioned JSON file holding the tree structure and
//! every parameter tensor. Saving a freshly loaded model reproduces the file
//! byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PreprocessState;
use crate::model::{AntModel, NodeKind, ParamRole};
use crate::module::{build_module, ModuleInstance, ModuleKind, ModuleSpec, TaskKind};
use crate::{AntError, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamRec {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModuleRec {
    kind: ModuleKind,
    recipe: String,
    downsample_freq: usize,
    input_shape: Vec<usize>,
    params: Vec<ParamRec>,
}

#[derive(Serialize, Deserialize)]
struct NodeFileRec {
    id: usize,
    parent: Option<usize>,
    depth: usize,
    /// None for leaves.
    children: Option<(usize, usize)>,
    edge: Vec<ModuleRec>,
    router: Option<ModuleRec>,
    solver: Option<ModuleRec>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    task: TaskKind,
    input_shape: Vec<usize>,
    preprocess: PreprocessState,
    nodes: Vec<NodeFileRec>,
}

fn module_rec(m: &ModuleInstance) -> ModuleRec {
    ModuleRec {
        kind: m.spec.kind,
        recipe: m.spec.recipe(),
        downsample_freq: m.spec.downsample_freq,
        input_shape: m.input_shape.clone(),
        params: m.params().map(|t| ParamRec { shape: t.shape.clone(), data: t.data.clone() }).collect(),
    }
}

fn rebuild_module(rec: &ModuleRec, task: TaskKind) -> Result<ModuleInstance> {
    let spec = ModuleSpec::parse(rec.kind, &rec.recipe, rec.downsample_freq)?;
    let mut m = build_module(&spec, &rec.input_shape, task, 0)?;
    let n = m.num_params_tensors();
    if n != rec.params.len() {
        return Err(AntError::Model(format!(
            "module {:?}: file has {} parameter tensors, recipe needs {}",
            rec.recipe,
            rec.params.len(),
            n
        )));
    }
    for (t, p) in m.params_mut().zip(&rec.params) {
        if t.shape != p.shape {
            return Err(AntError::Model(format!(
                "module {:?}: parameter shape {:?} does not match expected {:?}",
                rec.recipe, p.shape, t.shape
            )));
        }
        if p.data.len() != p.shape.iter().product::<usize>() {
            return Err(AntError::Model(format!(
                "module {:?}: parameter data length {} does not match shape {:?}",
                rec.recipe,
                p.data.len(),
                p.shape
            )));
        }
        t.data = p.data.clone();
    }
    Ok(m)
}

pub fn save_model(model: &AntModel, path: &Path) -> Result<()> {
    let mut nodes = Vec::with_capacity(model.num_nodes());
    for id in 0..model.num_nodes() {
        let children = match *model.kind(id) {
            NodeKind::Internal { left, right } => Some((left, right)),
            NodeKind::Leaf => None,
        };
        nodes.push(NodeFileRec {
            id,
            parent: model.parent(id),
            depth: model.depth(id),
            children,
            edge: model.edge_chain(id).iter().map(module_rec).collect(),
            router: model.router(id).map(module_rec),
            solver: model.solver(id).map(module_rec),
        });
    }
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        task: model.task,
        input_shape: model.input_shape.clone(),
        preprocess: model.preprocess.clone(),
        nodes,
    };
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, &file)
        .map_err(|e| AntError::Model(format!("writing {}: {}", path.display(), e)))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<AntModel> {
    let f = File::open(path)
        .map_err(|e| AntError::Model(format!("{}: {}", path.display(), e)))?;
    // peek the version first so mismatches are reported by number
    #[derive(Deserialize)]
    struct VersionOnly {
        format_version: u32,
    }
    let v: VersionOnly = serde_json::from_reader(BufReader::new(File::open(path)?))
        .map_err(|e| AntError::Model(format!("{}: not a model file: {}", path.display(), e)))?;
    if v.format_version != MODEL_FORMAT_VERSION {
        return Err(AntError::Model(format!(
            "{}: model file format version {} is not supported (this build reads version {})",
            path.display(),
            v.format_version,
            MODEL_FORMAT_VERSION
        )));
    }
    let file: ModelFile = serde_json::from_reader(BufReader::new(f))
        .map_err(|e| AntError::Model(format!("{}: {}", path.display(), e)))?;
    let mut nodes = Vec::with_capacity(file.nodes.len());
    let mut edges = Vec::with_capacity(file.nodes.len());
    let mut routers = Vec::with_capacity(file.nodes.len());
    let mut solvers = Vec::with_capacity(file.nodes.len());
    for (i, rec) in file.nodes.iter().enumerate() {
        if rec.id != i {
            return Err(AntError::Model(format!(
                "{}: node records out of order (found id {} at position {})",
                path.display(),
                rec.id,
                i
            )));
        }
        let kind = match rec.children {
            Some((l, r)) => NodeKind::Internal { left: l, right: r },
            None => NodeKind::Leaf,
        };
        nodes.push((kind, rec.parent, rec.depth));
        edges.push(
            rec.edge.iter().map(|m| rebuild_module(m, file.task)).collect::<Result<Vec<_>>>()?,
        );
        routers.push(rec.router.as_ref().map(|m| rebuild_module(m, file.task)).transpose()?);
        solvers.push(rec.solver.as_ref().map(|m| rebuild_module(m, file.task)).transpose()?);
    }
    AntModel::from_parts(
        file.task,
        file.input_shape,
        nodes,
        edges,
        routers,
        solvers,
        file.preprocess,
    )
}

/// Module role breakdown used by `inspect`.
pub fn describe_modules(model: &AntModel) -> Vec<(usize, String, String, usize, u64)> {
    let mut out = Vec::new();
    for (node, role) in model.module_addrs() {
        let m = model.module((node, role));
        let role_name = match role {
            ParamRole::Edge(i) => format!("edge[{}]", i),
            ParamRole::Router => "router".to_string(),
            ParamRole::Solver => "solver".to_string(),
        };
        out.push((node, role_name, m.spec.recipe(), m.param_count(), m.flops()));
    }
    out
}
