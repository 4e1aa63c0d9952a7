//! Structure-aware heterogeneous encoder.
//!
//! Embeddings are row matrices: `ops` is `|O| x d_h`, and an edge set between
//! a target class X and a neighbour class Y is `(|X| * |Y|) x d_e` with the
//! pair `(x, y)` at row `x * |Y| + y`.

use crate::hetgraph::HeteroGraphFeatures;
use crate::kernel::{EmptyRow, Graph, KernelError, ParameterStore, Tensor2, Var};
use crate::model::{ClassParams, Linear, ModelConfig, Policy, RelationParams};
use crate::num::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingSet {
    pub ops: Var,
    pub machines: Var,
    pub vehicles: Var,
    /// `(|O| * m) x d_e`, operation-major.
    pub edge_om: Var,
    /// `(|O| * v) x d_e`, operation-major.
    pub edge_ov: Var,
    /// `(m * m) x d_e`.
    pub edge_mm: Var,
    pub layer: usize,
}

/// Graph-level sizes and masks used by every layer.
struct Topology {
    n_ops: usize,
    m: usize,
    v: usize,
    mask_om: Vec<bool>,
    mask_mo: Vec<bool>,
    mask_ov: Vec<bool>,
    mask_vo: Vec<bool>,
    mask_mm: Vec<bool>,
    /// Row permutation turning a machine-major O–M edge set operation-major.
    perm_mo_to_om: Vec<usize>,
    perm_om_to_mo: Vec<usize>,
    perm_vo_to_ov: Vec<usize>,
    perm_ov_to_vo: Vec<usize>,
}

fn transpose_mask(mask: &[bool], rows: usize, cols: usize) -> Vec<bool> {
    (0..cols * rows).map(|i| mask[(i % rows) * cols + i / rows]).collect()
}

/// Rows of a `rows x cols` pair layout listed in `cols x rows` order.
fn transpose_perm(rows: usize, cols: usize) -> Vec<usize> {
    (0..cols * rows).map(|i| (i % rows) * cols + i / rows).collect()
}

impl Topology {
    fn new<S: Scalar>(f: &HeteroGraphFeatures<S>) -> Self {
        let (n_ops, m, v) = (f.num_ops(), f.num_machines(), f.num_vehicles());
        Self {
            n_ops,
            m,
            v,
            mask_mo: transpose_mask(&f.mask_om, n_ops, m),
            mask_vo: transpose_mask(&f.mask_ov, n_ops, v),
            mask_om: f.mask_om.clone(),
            mask_ov: f.mask_ov.clone(),
            mask_mm: vec![true; m * m],
            perm_mo_to_om: transpose_perm(m, n_ops),
            perm_om_to_mo: transpose_perm(n_ops, m),
            perm_vo_to_ov: transpose_perm(v, n_ops),
            perm_ov_to_vo: transpose_perm(n_ops, v),
        }
    }
}

/// Neighbour class seen by an attention block.
pub struct Source<'a> {
    pub nodes: Var,
    /// `(|X| * |Y|) x d_e` in target-major order.
    pub edges: Var,
    /// `|X| x |Y|` adjacency.
    pub mask: &'a [bool],
    pub rel: &'a RelationParams,
}

/// Messages and edge embeddings of one heterogeneous attention block.
pub struct HmhaOutput {
    /// `|X| x d_h`; zero for a node without neighbours.
    pub message: Var,
    /// Updated edge embeddings per source, masked pairs set to zero.
    pub edges: Vec<Var>,
}

fn mask_tensor<S: Scalar>(mask: &[bool], cols: usize) -> Tensor2<S> {
    Tensor2::from_fn(mask.len(), cols, |r, _| if mask[r] { S::one() } else { S::zero() })
}

/// Heterogeneous multi-head attention of `target` over the union of
/// `sources`, with one softmax across all neighbour classes.
pub fn hmha<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    class: &ClassParams,
    target: Var,
    sources: &[Source],
) -> Result<HmhaOutput, KernelError> {
    let n_x = g.shape(target).0;
    let dk = cfg.d_k();
    let inv_sqrt = S::one() / S::of((dk as f64).sqrt());
    let wq = g.param(store, class.wq);
    let q_all = g.matmul(target, wq)?;
    let mut keys = Vec::with_capacity(sources.len());
    let mut values = Vec::with_capacity(sources.len());
    for s in sources {
        let wk = g.param(store, s.rel.wk);
        let wv = g.param(store, s.rel.wv);
        keys.push(g.matmul(s.nodes, wk)?);
        values.push(g.matmul(s.nodes, wv)?);
    }
    let mut joint_mask = Vec::new();
    for x in 0..n_x {
        for s in sources {
            let n_y = g.shape(s.nodes).0;
            joint_mask.extend_from_slice(&s.mask[x * n_y..(x + 1) * n_y]);
        }
    }

    let mut heads = Vec::with_capacity(cfg.heads);
    let mut augmented: Vec<Vec<Var>> = vec![Vec::with_capacity(cfg.heads); sources.len()];
    for z in 0..cfg.heads {
        let q = g.slice_cols(q_all, z * dk, dk)?;
        let mut logits = Vec::with_capacity(sources.len());
        let mut vals = Vec::with_capacity(sources.len());
        for (si, s) in sources.iter().enumerate() {
            let n_y = g.shape(s.nodes).0;
            let k = g.slice_cols(keys[si], z * dk, dk)?;
            let kt = g.transpose(k);
            let dot = g.matmul(q, kt)?;
            let sigma = g.scale(dot, inv_sqrt);
            let flat = g.reshape(sigma, n_x * n_y, 1)?;
            let pair = g.concat_cols(&[flat, s.edges])?;
            let e1 = g.param(store, s.rel.e1[z]);
            let e2 = g.param(store, s.rel.e2[z]);
            let hidden = g.matmul(pair, e1)?;
            let hidden = g.relu(hidden);
            let aug = g.matmul(hidden, e2)?;
            augmented[si].push(aug);
            logits.push(g.reshape(aug, n_x, n_y)?);
            vals.push(g.slice_cols(values[si], z * dk, dk)?);
        }
        let logits = if logits.len() == 1 { logits[0] } else { g.concat_cols(&logits)? };
        let vals = if vals.len() == 1 { vals[0] } else { g.concat_rows(&vals)? };
        let weights = g.softmax_masked(logits, &joint_mask, EmptyRow::Zero)?;
        heads.push(g.matmul(weights, vals)?);
    }
    let stacked = g.concat_cols(&heads)?;
    let wo = g.param(store, class.wo);
    let message = g.matmul(stacked, wo)?;

    let mut edges = Vec::with_capacity(sources.len());
    for (si, s) in sources.iter().enumerate() {
        let per_head = g.concat_cols(&augmented[si])?;
        let e3 = g.param(store, s.rel.e3);
        let e = g.matmul(per_head, e3)?;
        let ff1 = g.param(store, s.rel.edge_ff1);
        let ff2 = g.param(store, s.rel.edge_ff2);
        let hidden = g.matmul(e, ff1)?;
        let hidden = g.relu(hidden);
        let e = g.matmul(hidden, ff2)?;
        edges.push(g.mul_const(e, mask_tensor(s.mask, cfg.d_e))?);
    }
    Ok(HmhaOutput { message, edges })
}

/// Residual add followed by instance normalisation, then the same around the
/// feed-forward block.
fn add_norm_ff<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    class: &ClassParams,
    x: Var,
    message: Var,
) -> Result<Var, KernelError> {
    let eps = S::of(cfg.norm_eps);
    let sum = g.add(x, message)?;
    let (g1, b1) = (g.param(store, class.an1_gain), g.param(store, class.an1_bias));
    let h = g.instance_norm(sum, g1, b1, eps)?;
    let ff1 = g.param(store, class.ff1);
    let ff2 = g.param(store, class.ff2);
    let hidden = g.matmul(h, ff1)?;
    let hidden = g.relu(hidden);
    let ff = g.matmul(hidden, ff2)?;
    let sum = g.add(h, ff)?;
    let (g2, b2) = (g.param(store, class.an2_gain), g.param(store, class.an2_bias));
    g.instance_norm(sum, g2, b2, eps)
}

fn linear<S: Scalar>(g: &mut Graph<S>, store: &ParameterStore<S>, lin: &Linear, x: Var) -> Result<Var, KernelError> {
    let w = g.param(store, lin.w);
    let b = g.param(store, lin.b);
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn edge_input<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    lin: &Linear,
    raw: &Tensor2<S>,
) -> Result<Var, KernelError> {
    let col = Tensor2::from_vec(raw.len(), 1, raw.data().to_vec())?;
    let c = g.constant(col);
    linear(g, store, lin, c)
}

/// Layer-0 embeddings: per-class linear maps of the raw features.
pub fn project_inputs<S: Scalar>(
    g: &mut Graph<S>,
    policy: &Policy<S>,
    f: &HeteroGraphFeatures<S>,
) -> Result<EmbeddingSet, KernelError> {
    let (store, ids) = (&policy.store, &policy.ids);
    let o = g.constant(f.op_feats.clone());
    let m = g.constant(f.mach_feats.clone());
    let v = g.constant(f.veh_feats.clone());
    Ok(EmbeddingSet {
        ops: linear(g, store, &ids.in_op, o)?,
        machines: linear(g, store, &ids.in_machine, m)?,
        vehicles: linear(g, store, &ids.in_vehicle, v)?,
        edge_om: edge_input(g, store, &ids.edge_om, &f.edge_om)?,
        edge_ov: edge_input(g, store, &ids.edge_ov, &f.edge_ov)?,
        edge_mm: edge_input(g, store, &ids.edge_mm, &f.edge_mm)?,
        layer: 0,
    })
}

fn encode_layer<S: Scalar>(
    g: &mut Graph<S>,
    policy: &Policy<S>,
    topo: &Topology,
    e: &EmbeddingSet,
    layer: usize,
) -> Result<EmbeddingSet, KernelError> {
    let (store, cfg) = (&policy.store, &policy.cfg);
    let p = &policy.ids.layers[layer - 1];
    let edge_mo = g.gather_rows(e.edge_om, &topo.perm_om_to_mo)?;
    let edge_vo = g.gather_rows(e.edge_ov, &topo.perm_ov_to_vo)?;

    let op_out = hmha(
        g,
        store,
        cfg,
        &p.op,
        e.ops,
        &[
            Source {
                nodes: e.machines,
                edges: e.edge_om,
                mask: &topo.mask_om,
                rel: &p.om,
            },
            Source {
                nodes: e.vehicles,
                edges: e.edge_ov,
                mask: &topo.mask_ov,
                rel: &p.ov,
            },
        ],
    )?;
    let machine_out = hmha(
        g,
        store,
        cfg,
        &p.machine,
        e.machines,
        &[
            Source {
                nodes: e.ops,
                edges: edge_mo,
                mask: &topo.mask_mo,
                rel: &p.mo,
            },
            Source {
                nodes: e.machines,
                edges: e.edge_mm,
                mask: &topo.mask_mm,
                rel: &p.mm,
            },
        ],
    )?;
    let vehicle_out = hmha(
        g,
        store,
        cfg,
        &p.vehicle,
        e.vehicles,
        &[Source {
            nodes: e.ops,
            edges: edge_vo,
            mask: &topo.mask_vo,
            rel: &p.vo,
        }],
    )?;

    let ops = add_norm_ff(g, store, cfg, &p.op, e.ops, op_out.message)?;
    let machines = add_norm_ff(g, store, cfg, &p.machine, e.machines, machine_out.message)?;
    let vehicles = add_norm_ff(g, store, cfg, &p.vehicle, e.vehicles, vehicle_out.message)?;

    // Both endpoints produce an embedding for a shared edge; the next layer
    // consumes their sum.
    let kij = g.gather_rows(machine_out.edges[0], &topo.perm_mo_to_om)?;
    let edge_om = g.add(op_out.edges[0], kij)?;
    let uij = g.gather_rows(vehicle_out.edges[0], &topo.perm_vo_to_ov)?;
    let edge_ov = g.add(op_out.edges[1], uij)?;
    Ok(EmbeddingSet {
        ops,
        machines,
        vehicles,
        edge_om,
        edge_ov,
        edge_mm: machine_out.edges[1],
        layer,
    })
}

/// Runs every encoder layer; the result is the final embedding set.
pub fn encode<S: Scalar>(
    g: &mut Graph<S>,
    policy: &Policy<S>,
    f: &HeteroGraphFeatures<S>,
) -> Result<EmbeddingSet, KernelError> {
    encode_layers(g, policy, f, policy.cfg.layers)
}

/// Runs the first `depth` layers (0 returns the projected inputs).
pub fn encode_layers<S: Scalar>(
    g: &mut Graph<S>,
    policy: &Policy<S>,
    f: &HeteroGraphFeatures<S>,
    depth: usize,
) -> Result<EmbeddingSet, KernelError> {
    let topo = Topology::new(f);
    debug_assert_eq!(topo.n_ops * topo.m, topo.mask_om.len());
    debug_assert_eq!(topo.n_ops * topo.v, topo.mask_ov.len());
    let mut e = project_inputs(g, policy, f)?;
    for l in 1..=depth.min(policy.cfg.layers) {
        e = encode_layer(g, policy, &topo, &e, l)?;
    }
    Ok(e)
}
