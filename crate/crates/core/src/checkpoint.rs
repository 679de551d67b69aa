//! Binary checkpoint: model spec, variational parameters, normalization
//! statistics, and optionally the optimizer state needed to resume training.
//!
//! Layout (little-endian): magic `VBDOCKP1`, version byte, branch/trunk/head
//! net descriptors, merge mode, sigma floor, training mode, parameter count,
//! `mu`, `delta`, normalization block, training-state block, CRC32.

use std::path::Path;

use crate::dataset::NormStats;
use crate::deeponet::{DeepONetSpec, MergeMode};
use crate::error::{Error, Result};
use crate::io::{read_file, write_file, Decoder, Encoder};
use crate::nn::{Activation, LayerSpec, NetSpec};
use crate::trainer::{OptimizerState, TrainMode, TrainState};
use crate::variational::VariationalParams;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VBDOCKP1";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SavedTrainState {
    pub epoch: u64,
    pub step: u64,
    pub optimizer_kind: u8,
    pub optimizer: OptimizerState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: DeepONetSpec,
    pub mode: TrainMode,
    pub params: VariationalParams,
    pub norm: Option<NormStats>,
    pub state: Option<SavedTrainState>,
}

fn encode_net(e: &mut Encoder, net: &NetSpec) {
    e.u32(net.layers().len() as u32);
    for l in net.layers() {
        e.u32(l.in_dim as u32);
        e.u32(l.out_dim as u32);
        e.u8(l.activation.code());
    }
}

fn decode_net(d: &mut Decoder<'_>) -> Result<NetSpec> {
    let n = d.u32()? as usize;
    if n > 4096 {
        return Err(Error::Format(format!("implausible layer count {n}")));
    }
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let in_dim = d.u32()? as usize;
        let out_dim = d.u32()? as usize;
        let act = Activation::from_code(d.u8()?)?;
        layers.push(LayerSpec::new(in_dim, out_dim, act));
    }
    NetSpec::new(layers).map_err(|e| Error::Format(format!("bad net descriptor: {e}")))
}

impl Checkpoint {
    pub fn new(spec: &DeepONetSpec, mode: TrainMode, params: VariationalParams, norm: Option<NormStats>) -> Self {
        Self {
            spec: spec.clone(),
            mode,
            params,
            norm,
            state: None,
        }
    }

    pub fn from_train_state(
        spec: &DeepONetSpec,
        mode: TrainMode,
        optimizer_kind: u8,
        state: &TrainState,
        norm: Option<NormStats>,
    ) -> Self {
        Self {
            spec: spec.clone(),
            mode,
            params: state.params.clone(),
            norm,
            state: Some(SavedTrainState {
                epoch: state.epoch,
                step: state.step,
                optimizer_kind,
                optimizer: state.optimizer.clone(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::default();
        e.bytes(CHECKPOINT_MAGIC);
        e.u8(CHECKPOINT_VERSION);
        encode_net(&mut e, &self.spec.branch);
        encode_net(&mut e, &self.spec.trunk);
        encode_net(&mut e, &self.spec.head_net());
        e.u8(self.spec.merge.code());
        e.f64(self.spec.sigma_floor);
        e.u8(self.mode.code());
        e.u64(self.params.len() as u64);
        e.f64s(&self.params.mu);
        e.f64s(&self.params.delta);
        match &self.norm {
            Some(n) => {
                e.u8(1);
                n.encode(&mut e);
            }
            None => e.u8(0),
        }
        match &self.state {
            Some(s) => {
                e.u8(1);
                e.u64(s.epoch);
                e.u64(s.step);
                e.u8(s.optimizer_kind);
                e.u64(s.optimizer.t);
                e.u64(s.optimizer.m.len() as u64);
                e.f64s(&s.optimizer.m);
                e.f64s(&s.optimizer.v);
            }
            None => e.u8(0),
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::open(bytes, CHECKPOINT_MAGIC, "checkpoint", CHECKPOINT_VERSION)?;
        let branch = decode_net(&mut d)?;
        let trunk = decode_net(&mut d)?;
        let head = decode_net(&mut d)?;
        let merge = MergeMode::from_code(d.u8()?)?;
        let sigma_floor = d.f64()?;
        let spec = DeepONetSpec::new(branch, trunk, merge, sigma_floor)
            .map_err(|e| Error::Format(format!("bad model spec: {e}")))?;
        if head != spec.head_net() {
            return Err(Error::Format("head descriptor inconsistent with merge mode".into()));
        }
        let mode = TrainMode::from_code(d.u8()?)?;
        let p = d.u64()? as usize;
        if p != spec.param_count() {
            return Err(Error::Format(format!(
                "parameter count {p} does not match spec ({})",
                spec.param_count()
            )));
        }
        let mu = d.f64s(p)?;
        let delta = d.f64s(p)?;
        let params = VariationalParams::new(mu, delta)?;
        let norm = match d.u8()? {
            0 => None,
            1 => Some(NormStats::decode(&mut d, spec.sensors())?),
            f => return Err(Error::Format(format!("bad normalization flag {f}"))),
        };
        let state = match d.u8()? {
            0 => None,
            1 => {
                let epoch = d.u64()?;
                let step = d.u64()?;
                let optimizer_kind = d.u8()?;
                let t = d.u64()?;
                let len = d.u64()? as usize;
                if len != 2 * p {
                    return Err(Error::Format(format!("optimizer state length {len}, expected {}", 2 * p)));
                }
                let m = d.f64s(len)?;
                let v = d.f64s(len)?;
                Some(SavedTrainState {
                    epoch,
                    step,
                    optimizer_kind,
                    optimizer: OptimizerState { m, v, t },
                })
            }
            f => return Err(Error::Format(format!("bad training-state flag {f}"))),
        };
        d.finish()?;
        Ok(Self {
            spec,
            mode,
            params,
            norm,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Errors unless the stored spec equals `expected`.
    pub fn check_spec(&self, expected: &DeepONetSpec) -> Result<()> {
        if &self.spec == expected {
            Ok(())
        } else {
            Err(Error::SpecMismatch(format!(
                "checkpoint holds branch {:?} / trunk {:?} / {:?}, expected branch {:?} / trunk {:?} / {:?}",
                layer_dims(&self.spec.branch),
                layer_dims(&self.spec.trunk),
                self.spec.merge,
                layer_dims(&expected.branch),
                layer_dims(&expected.trunk),
                expected.merge,
            )))
        }
    }
}

fn layer_dims(net: &NetSpec) -> Vec<(usize, usize)> {
    net.layers().iter().map(|l| (l.in_dim, l.out_dim)).collect()
}
