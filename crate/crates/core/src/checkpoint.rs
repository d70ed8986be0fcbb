//! Versioned binary checkpoint.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "FGLCKPT\0", version u32
//! config   nbf k convs_per_block height width: u32; coarse_front refined_front attention coarse_to_fine: u8
//! kernels  count u32, size u32, count*size*size f64
//! training iteration u64, seed u64, adam_step u64, lr beta1 beta2 eps: f64, has_moments u8
//! manifest count u32, then per tensor: name_len u32, name, dims 4*u32, trainable u8
//! data     every tensor as f32 in manifest order, then first and second moments if present
//! history  count u64, then per record: iteration u64, phase u8, eps_count u32, eps f64*, loss f64
//! ```
//!
//! The decoder treats its input as untrusted: every length is checked
//! against the bytes that remain before anything is allocated.

use std::fs;
use std::path::{Path, PathBuf};

use forgeloc_autograd::{AdamState, ParamStore, Shape, Tensor};
use thiserror::Error;

use crate::hpf::{HpfKernelBank, KERNEL_COUNT, KERNEL_SIZE};
use crate::network::{CoarseToFineModel, ModelConfig, NoiseFront};
use crate::seed::rng_for;
use crate::train::{PhaseRecord, TrainState};

pub const MAGIC: &[u8; 8] = b"FGLCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("invalid checkpoint field {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("{0} trailing bytes after checkpoint data")]
    TrailingBytes(usize),
    #[error("checkpoint does not match the model topology: {0}")]
    Topology(String),
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub kernels: HpfKernelBank,
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
    pub iteration: u64,
    pub seed: u64,
    pub history: Vec<PhaseRecord>,
}

impl Checkpoint {
    pub fn from_state(model: &CoarseToFineModel, state: &TrainState, seed: u64) -> Self {
        Checkpoint {
            config: model.config.clone(),
            kernels: model.kernel_bank().clone(),
            params: state.params.clone(),
            adam: Some(state.adam.clone()),
            iteration: state.iteration,
            seed,
            history: state.history.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::with_capacity(4 * self.params.num_elements() * 3 + 1024));
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);

        let c = &self.config;
        for v in [c.nbf, c.k, c.convs_per_block, c.input_size.0, c.input_size.1] {
            w.u32(v as u32);
        }
        w.u8(c.coarse_front.code());
        w.u8(c.refined_front.code());
        w.u8(u8::from(c.attention));
        w.u8(u8::from(c.coarse_to_fine));

        w.u32(KERNEL_COUNT as u32);
        w.u32(KERNEL_SIZE as u32);
        for k in self.kernels.kernels() {
            for &v in k {
                w.f64(v);
            }
        }

        w.u64(self.iteration);
        w.u64(self.seed);
        let (step, lr, b1, b2, eps) = self.adam.as_ref().map_or((0, 0.0, 0.0, 0.0, 0.0), |a| {
            (a.step_count, a.lr, a.beta1, a.beta2, a.eps)
        });
        w.u64(step);
        for v in [lr, b1, b2, eps] {
            w.f64(v);
        }
        w.u8(u8::from(self.adam.is_some()));

        w.u32(self.params.len() as u32);
        for (_, p) in self.params.iter() {
            w.u32(p.name.len() as u32);
            w.0.extend_from_slice(p.name.as_bytes());
            for d in p.value.shape().0 {
                w.u32(d as u32);
            }
            w.u8(u8::from(p.trainable));
        }
        for (_, p) in self.params.iter() {
            w.f32s(p.value.data());
        }
        if let Some(a) = &self.adam {
            for t in a.first_moment.iter().chain(&a.second_moment) {
                w.f32s(t.data());
            }
        }

        w.u64(self.history.len() as u64);
        for r in &self.history {
            w.u64(r.iteration);
            w.u8(r.phase);
            w.u32(r.eps.len() as u32);
            for &e in &r.eps {
                w.f64(e);
            }
            w.f64(r.loss);
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }

        let nbf = r.u32("nbf")? as usize;
        let k = r.u32("k")? as usize;
        let convs_per_block = r.u32("convs_per_block")? as usize;
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        let front = |code: u8, field| {
            NoiseFront::from_code(code).ok_or(CheckpointError::Invalid {
                field,
                reason: format!("unknown front code {code}"),
            })
        };
        let coarse_front = front(r.u8("coarse_front")?, "coarse_front")?;
        let refined_front = front(r.u8("refined_front")?, "refined_front")?;
        let attention = r.flag("attention")?;
        let coarse_to_fine = r.flag("coarse_to_fine")?;
        let config = ModelConfig {
            nbf,
            k,
            convs_per_block,
            input_size: (height, width),
            coarse_front,
            refined_front,
            attention,
            coarse_to_fine,
        };

        let count = r.u32("kernel count")? as usize;
        let size = r.u32("kernel size")? as usize;
        if count != KERNEL_COUNT || size != KERNEL_SIZE {
            return Err(CheckpointError::Invalid {
                field: "kernels",
                reason: format!(
                    "expected {KERNEL_COUNT} kernels of {KERNEL_SIZE}x{KERNEL_SIZE}, found {count} of {size}x{size}"
                ),
            });
        }
        let mut kernels = [[0.0; KERNEL_SIZE * KERNEL_SIZE]; KERNEL_COUNT];
        for k in &mut kernels {
            for v in k.iter_mut() {
                *v = r.f64("kernels")?;
            }
        }

        let iteration = r.u64("iteration")?;
        let seed = r.u64("seed")?;
        let step_count = r.u64("adam step")?;
        let lr = r.f64("lr")?;
        let beta1 = r.f64("beta1")?;
        let beta2 = r.f64("beta2")?;
        let eps = r.f64("adam eps")?;
        let has_moments = r.flag("has_moments")?;
        // without moments the optimizer fields are written as zeros; keep the format canonical
        if !has_moments && (step_count != 0 || [lr, beta1, beta2, eps].iter().any(|v| v.to_bits() != 0)) {
            return Err(CheckpointError::Invalid {
                field: "adam",
                reason: "optimizer settings present without moments".into(),
            });
        }

        let n_params = r.u32("parameter count")? as usize;
        // each manifest entry needs at least 21 bytes
        r.ensure(n_params.saturating_mul(21), "manifest")?;
        let mut manifest = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|e| CheckpointError::Invalid {
                    field: "name",
                    reason: e.to_string(),
                })?
                .to_string();
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32("dims")? as usize;
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or(CheckpointError::Invalid {
                    field: "dims",
                    reason: format!("{dims:?} overflows"),
                })?;
            let trainable = r.flag("trainable")?;
            manifest.push((name, Shape(dims), numel, trainable));
        }

        let mut params = ParamStore::new();
        for (name, shape, numel, trainable) in &manifest {
            let data = r.f32s(*numel, "parameter data")?;
            let id = params.add(name.clone(), Tensor::from_vec(*shape, data).expect("length checked"));
            params.set_trainable(id, *trainable);
        }
        let adam = if has_moments {
            let mut read = |what| {
                manifest
                    .iter()
                    .map(|(_, shape, numel, _)| {
                        Ok(Tensor::from_vec(*shape, r.f32s(*numel, what)?).expect("length checked"))
                    })
                    .collect::<Result<Vec<_>>>()
            };
            let first_moment = read("first moment")?;
            let second_moment = read("second moment")?;
            Some(AdamState {
                lr,
                beta1,
                beta2,
                eps,
                step_count,
                first_moment,
                second_moment,
            })
        } else {
            None
        };

        let n_hist = r.u64("history length")?;
        // each record needs at least 21 bytes
        r.ensure((n_hist as usize).saturating_mul(21), "history")?;
        let mut history = Vec::with_capacity(n_hist as usize);
        for _ in 0..n_hist {
            let iteration = r.u64("history iteration")?;
            let phase = r.u8("history phase")?;
            let n_eps = r.u32("history eps count")? as usize;
            r.ensure(n_eps.saturating_mul(8), "history eps")?;
            let eps = (0..n_eps).map(|_| r.f64("history eps")).collect::<Result<Vec<_>>>()?;
            let loss = r.f64("history loss")?;
            history.push(PhaseRecord {
                iteration,
                phase,
                eps,
                loss,
            });
        }

        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Checkpoint {
            config,
            kernels: HpfKernelBank::from_kernels(kernels),
            params,
            adam,
            iteration,
            seed,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }

    /// Rebuilds the model and a training state. The stored tensors must match
    /// the topology implied by the stored config name for name and shape.
    pub fn into_model(self) -> crate::Result<(CoarseToFineModel, TrainState)> {
        let (model, fresh) = CoarseToFineModel::new(self.config.clone(), &mut rng_for(0, "checkpoint"))?;
        if &self.kernels != model.kernel_bank() {
            return Err(CheckpointError::Topology("high-pass kernels differ from the fixed bank".into()).into());
        }
        if fresh.len() != self.params.len() {
            return Err(CheckpointError::Topology(format!(
                "expected {} tensors, found {}",
                fresh.len(),
                self.params.len()
            ))
            .into());
        }
        for ((_, a), (_, b)) in fresh.iter().zip(self.params.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(CheckpointError::Topology(format!(
                    "expected {} {}, found {} {}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                ))
                .into());
            }
        }
        let adam = match self.adam {
            Some(a) => a,
            None => AdamState::with_lr(&self.params, crate::train::DEFAULT_LR),
        };
        Ok((
            model,
            TrainState {
                params: self.params,
                adam,
                iteration: self.iteration,
                history: self.history,
            },
        ))
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn ensure(&self, n: usize, what: &'static str) -> Result<()> {
        if self.bytes.len() - self.pos < n {
            Err(CheckpointError::Truncated(what))
        } else {
            Ok(())
        }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        self.ensure(n, what)?;
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("slice has length N"))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn flag(&mut self, what: &'static str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(CheckpointError::Invalid {
                field: what,
                reason: format!("flag byte {v}"),
            }),
        }
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(what))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (CoarseToFineModel, TrainState) {
        let cfg = ModelConfig {
            nbf: 4,
            k: 4,
            convs_per_block: 1,
            input_size: (8, 8),
            ..ModelConfig::default()
        };
        let (model, params) = CoarseToFineModel::new(cfg, &mut rng_for(1, "init")).unwrap();
        let mut state = TrainState::new(params, 0.002);
        state.iteration = 7;
        state.adam.step_count = 3;
        state.adam.first_moment[0].data_mut()[0] = 0.25;
        state.history.push(PhaseRecord {
            iteration: 6,
            phase: 2,
            eps: vec![0.003],
            loss: 1.5,
        });
        (model, state)
    }

    #[test]
    fn round_trip_is_exact() {
        let (model, state) = small();
        let ck = Checkpoint::from_state(&model, &state, 42);
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        let (_, restored) = back.into_model().unwrap();
        assert_eq!(restored.iteration, 7);
        assert_eq!(restored.adam, state.adam);
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let (model, state) = small();
        let mut bytes = Checkpoint::from_state(&model, &state, 0).encode();
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(matches!(Checkpoint::decode(&corrupt), Err(CheckpointError::BadMagic)));
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(CheckpointError::Version { found: 9, .. })
        ));
    }

    #[test]
    fn every_truncation_rejected() {
        let (model, state) = small();
        let bytes = Checkpoint::from_state(&model, &state, 0).encode();
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            Checkpoint::decode(&long),
            Err(CheckpointError::TrailingBytes(1))
        ));
    }

    #[test]
    fn optimizer_fields_without_moments_rejected() {
        let (model, state) = small();
        let mut ck = Checkpoint::from_state(&model, &state, 0x5eed_5eed_5eed_5eed);
        ck.adam = None;
        let bytes = ck.encode();
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
        // step count and learning rate follow the seed
        let seed_at = bytes.windows(8).position(|w| w == 0x5eed_5eed_5eed_5eedu64.to_le_bytes()).unwrap();
        for offset in [seed_at + 8, seed_at + 16, seed_at + 23] {
            let mut bad = bytes.clone();
            bad[offset] ^= 0x40;
            assert!(Checkpoint::decode(&bad).is_err(), "offset {offset}");
        }
    }

    #[test]
    fn topology_mismatch_rejected() {
        let (model, state) = small();
        let mut ck = Checkpoint::from_state(&model, &state, 0);
        ck.config.nbf = 8;
        assert!(ck.into_model().is_err());
    }
}
