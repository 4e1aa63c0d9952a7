//! Policy configuration and parameter layout shared by the encoder and the
//! decoder.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::hetgraph::{MACHINE_FEATURES, OP_FEATURES, VEHICLE_FEATURES};
use crate::kernel::{Init, KernelError, ParamId, ParameterStore};
use crate::num::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Node embedding width.
    pub d_h: usize,
    /// Attention heads; must divide `d_h`.
    pub heads: usize,
    /// Edge embedding width.
    pub d_e: usize,
    /// Hidden width of the augmented-compatibility map.
    pub d_z: usize,
    /// Hidden width of the feed-forward blocks.
    pub d_ff: usize,
    /// Encoder depth; the last layer is the global one.
    pub layers: usize,
    /// Logit clipping constant of the decoder.
    pub clip: f64,
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn reference() -> Self {
        Self {
            d_h: 128,
            heads: 8,
            d_e: 1,
            d_z: 16,
            d_ff: 512,
            layers: 2,
            clip: 10.0,
            norm_eps: 1e-5,
        }
    }

    /// Small configuration for tests and desk-scale training.
    pub fn tiny() -> Self {
        Self {
            d_h: 8,
            heads: 2,
            d_e: 1,
            d_z: 4,
            d_ff: 16,
            layers: 1,
            clip: 10.0,
            norm_eps: 1e-5,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_h / self.heads
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let bad = |m: &str| Err(KernelError::Checkpoint(format!("invalid model config: {m}")));
        if self.d_h == 0 || self.heads == 0 || self.d_e == 0 || self.d_z == 0 || self.d_ff == 0 {
            return bad("widths must be positive");
        }
        if !self.d_h.is_multiple_of(self.heads) {
            return bad("heads must divide d_h");
        }
        if self.layers == 0 {
            return bad("at least one encoder layer is required");
        }
        if !(self.clip > 0.0) || !(self.norm_eps > 0.0) {
            return bad("clip and norm_eps must be positive");
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::reference()
    }
}

/// Per node-class attention block parameters.
#[derive(Debug, Clone)]
pub struct ClassParams {
    pub wq: ParamId,
    pub wo: ParamId,
    pub ff1: ParamId,
    pub ff2: ParamId,
    pub an1_gain: ParamId,
    pub an1_bias: ParamId,
    pub an2_gain: ParamId,
    pub an2_bias: ParamId,
}

/// Per relation (target class, neighbour class) parameters.
#[derive(Debug, Clone)]
pub struct RelationParams {
    pub wk: ParamId,
    pub wv: ParamId,
    /// One `(1 + d_e) x d_z` matrix per head.
    pub e1: Vec<ParamId>,
    /// One `d_z x 1` matrix per head.
    pub e2: Vec<ParamId>,
    /// `heads x d_e`.
    pub e3: ParamId,
    pub edge_ff1: ParamId,
    pub edge_ff2: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub op: ClassParams,
    pub machine: ClassParams,
    pub vehicle: ClassParams,
    /// Operations attending to machines.
    pub om: RelationParams,
    pub ov: RelationParams,
    /// Machines attending to operations.
    pub mo: RelationParams,
    pub mm: RelationParams,
    pub vo: RelationParams,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct StageParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    /// Single-head pointer projections.
    pub ptr_q: ParamId,
    pub ptr_k: ParamId,
}

#[derive(Debug, Clone)]
pub struct PolicyIds {
    pub in_op: Linear,
    pub in_machine: Linear,
    pub in_vehicle: Linear,
    pub edge_om: Linear,
    pub edge_ov: Linear,
    pub edge_mm: Linear,
    pub layers: Vec<LayerParams>,
    pub stages: [StageParams; 3],
}

struct Builder<'a, S> {
    store: &'a mut ParameterStore<S>,
}

impl<S: Scalar> Builder<'_, S> {
    fn w(&mut self, name: String, rows: usize, cols: usize) -> Result<ParamId, KernelError> {
        self.store.add(&name, rows, cols, Init::Uniform { fan_in: rows })
    }

    fn linear(&mut self, name: &str, rows: usize, cols: usize) -> Result<Linear, KernelError> {
        Ok(Linear {
            w: self.w(format!("{name}.w"), rows, cols)?,
            b: self.store.add(&format!("{name}.b"), 1, cols, Init::Uniform { fan_in: rows })?,
        })
    }

    fn class(&mut self, p: &str, c: &ModelConfig) -> Result<ClassParams, KernelError> {
        let hk = c.heads * c.d_k();
        Ok(ClassParams {
            wq: self.w(format!("{p}.wq"), c.d_h, hk)?,
            wo: self.w(format!("{p}.wo"), hk, c.d_h)?,
            ff1: self.w(format!("{p}.ff1"), c.d_h, c.d_ff)?,
            ff2: self.w(format!("{p}.ff2"), c.d_ff, c.d_h)?,
            an1_gain: self.store.add(&format!("{p}.an1.gain"), 1, c.d_h, Init::Ones)?,
            an1_bias: self.store.add(&format!("{p}.an1.bias"), 1, c.d_h, Init::Zeros)?,
            an2_gain: self.store.add(&format!("{p}.an2.gain"), 1, c.d_h, Init::Ones)?,
            an2_bias: self.store.add(&format!("{p}.an2.bias"), 1, c.d_h, Init::Zeros)?,
        })
    }

    fn relation(&mut self, p: &str, c: &ModelConfig) -> Result<RelationParams, KernelError> {
        let hk = c.heads * c.d_k();
        let mut e1 = Vec::with_capacity(c.heads);
        let mut e2 = Vec::with_capacity(c.heads);
        for z in 0..c.heads {
            e1.push(self.w(format!("{p}.e1.{z}"), 1 + c.d_e, c.d_z)?);
            e2.push(self.w(format!("{p}.e2.{z}"), c.d_z, 1)?);
        }
        Ok(RelationParams {
            wk: self.w(format!("{p}.wk"), c.d_h, hk)?,
            wv: self.w(format!("{p}.wv"), c.d_h, hk)?,
            e1,
            e2,
            e3: self.w(format!("{p}.e3"), c.heads, c.d_e)?,
            edge_ff1: self.w(format!("{p}.edge_ff1"), c.d_e, c.d_ff)?,
            edge_ff2: self.w(format!("{p}.edge_ff2"), c.d_ff, c.d_e)?,
        })
    }

    fn stage(&mut self, p: &str, query_in: usize, c: &ModelConfig) -> Result<StageParams, KernelError> {
        let hk = c.heads * c.d_k();
        Ok(StageParams {
            wq: self.w(format!("{p}.wq"), query_in, hk)?,
            wk: self.w(format!("{p}.wk"), c.d_h, hk)?,
            wv: self.w(format!("{p}.wv"), c.d_h, hk)?,
            wo: self.w(format!("{p}.wo"), hk, c.d_h)?,
            ptr_q: self.w(format!("{p}.ptr_q"), c.d_h, c.d_h)?,
            ptr_k: self.w(format!("{p}.ptr_k"), c.d_h, c.d_h)?,
        })
    }
}

fn register<S: Scalar>(cfg: &ModelConfig, store: &mut ParameterStore<S>) -> Result<PolicyIds, KernelError> {
    let mut b = Builder { store };
    let c = cfg;
    let in_op = b.linear("in.op", OP_FEATURES, c.d_h)?;
    let in_machine = b.linear("in.machine", MACHINE_FEATURES, c.d_h)?;
    let in_vehicle = b.linear("in.vehicle", VEHICLE_FEATURES, c.d_h)?;
    let edge_om = b.linear("in.edge_om", 1, c.d_e)?;
    let edge_ov = b.linear("in.edge_ov", 1, c.d_e)?;
    let edge_mm = b.linear("in.edge_mm", 1, c.d_e)?;
    let mut layers = Vec::with_capacity(c.layers);
    for l in 1..c.layers {
        let p = format!("enc.{l}");
        layers.push(LayerParams {
            op: b.class(&format!("{p}.op"), c)?,
            machine: b.class(&format!("{p}.machine"), c)?,
            vehicle: b.class(&format!("{p}.vehicle"), c)?,
            om: b.relation(&format!("{p}.om"), c)?,
            ov: b.relation(&format!("{p}.ov"), c)?,
            mo: b.relation(&format!("{p}.mo"), c)?,
            mm: b.relation(&format!("{p}.mm"), c)?,
            vo: b.relation(&format!("{p}.vo"), c)?,
        });
    }
    let class = b.class("enc.global.node", c)?;
    let rel = b.relation("enc.global.edge", c)?;
    layers.push(LayerParams {
        op: class.clone(),
        machine: class.clone(),
        vehicle: class,
        om: rel.clone(),
        ov: rel.clone(),
        mo: rel.clone(),
        mm: rel.clone(),
        vo: rel,
    });
    let stages = [
        b.stage("dec.op", 2 * c.d_h, c)?,
        b.stage("dec.machine", c.d_h, c)?,
        b.stage("dec.vehicle", c.d_h, c)?,
    ];
    Ok(PolicyIds {
        in_op,
        in_machine,
        in_vehicle,
        edge_om,
        edge_ov,
        edge_mm,
        layers,
        stages,
    })
}

/// Trainable policy: configuration, parameters and their handles.
#[derive(Debug, Clone)]
pub struct Policy<S> {
    pub cfg: ModelConfig,
    pub store: ParameterStore<S>,
    pub ids: PolicyIds,
}

impl<S: Scalar> Policy<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, KernelError> {
        cfg.validate()?;
        let mut store = ParameterStore::new(seed);
        let ids = register(&cfg, &mut store)?;
        store.set_meta(serde_json::json!({ "model": cfg }));
        Ok(Self { cfg, store, ids })
    }

    /// Rebuilds the handles for a store whose metadata holds the model config.
    pub fn from_store(store: ParameterStore<S>) -> Result<Self, KernelError> {
        let cfg: ModelConfig = store
            .meta()
            .get("model")
            .cloned()
            .ok_or_else(|| KernelError::Checkpoint("metadata lacks the model config".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| KernelError::Checkpoint(format!("model config: {e}"))))?;
        cfg.validate()?;
        let mut fresh = ParameterStore::<S>::new(store.seed());
        let ids = register(&cfg, &mut fresh)?;
        if fresh.len() != store.len() {
            return Err(KernelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                fresh.len(),
                store.len()
            )));
        }
        for id in fresh.ids() {
            let name = fresh.name(id);
            let other = store.id(name)?;
            if other != id || store.value(other).shape() != fresh.value(id).shape() {
                return Err(KernelError::Checkpoint(format!("parameter {name} does not match the layout")));
            }
        }
        Ok(Self { cfg, store, ids })
    }

    pub fn save(&self, path: &Path) -> Result<(), KernelError> {
        self.store.save(path)
    }

    pub fn load(path: &Path) -> Result<Self, KernelError> {
        Self::from_store(ParameterStore::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent parameter count from the block shapes.
    fn expected_count(c: &ModelConfig) -> usize {
        let (dh, z, dk, de, dz, dff) = (c.d_h, c.heads, c.d_k(), c.d_e, c.d_z, c.d_ff);
        let inputs = (7 + 4 + 4) * dh + 3 * dh + 3 * (de + de);
        let class = dh * z * dk + z * dk * dh + 2 * dh * dff + 4 * dh;
        let relation = 2 * dh * z * dk + z * ((1 + de) * dz + dz) + z * de + 2 * de * dff;
        let encoder = (c.layers - 1) * (3 * class + 5 * relation) + class + relation;
        let stage = |q_in: usize| q_in * z * dk + 2 * dh * z * dk + z * dk * dh + 2 * dh * dh;
        inputs + encoder + stage(2 * dh) + 2 * stage(dh)
    }

    #[test]
    fn reference_parameter_count() {
        let p = Policy::<f64>::new(ModelConfig::reference(), 0).unwrap();
        assert_eq!(p.store.num_scalars(), expected_count(&ModelConfig::reference()));
        // hand total for d_h 128, 8 heads, d_e 1, d_z 16, d_ff 512, L 2
        assert_eq!(p.store.num_scalars(), 1_176_118);
        let t = Policy::<f64>::new(ModelConfig::tiny(), 0).unwrap();
        assert_eq!(t.store.num_scalars(), expected_count(&ModelConfig::tiny()));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny();
        c.heads = 3;
        assert!(Policy::<f64>::new(c, 0).is_err());
        c = ModelConfig::tiny();
        c.layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn store_round_trip_rebuilds_layout() {
        let p = Policy::<f64>::new(ModelConfig::tiny(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        p.save(&path).unwrap();
        let q = Policy::<f64>::load(&path).unwrap();
        assert_eq!(q.cfg, p.cfg);
        assert_eq!(q.store.to_checkpoint(), p.store.to_checkpoint());
        let mut other = ParameterStore::<f64>::new(0);
        other.set_meta(serde_json::json!({ "model": ModelConfig::tiny() }));
        assert!(Policy::from_store(other).is_err());
    }
}
