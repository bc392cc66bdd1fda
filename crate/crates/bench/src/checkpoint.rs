//! Training state as a tagged-tensor archive: parameters, optimizer
//! velocity, iteration count and the exact position of the RNG stream.

use std::path::Path;

use lffn_core::container::TensorArchive;
use lffn_core::params::ParamSet;
use lffn_core::{Error, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::io::{read_bytes, write_atomic};
use crate::model::Detector;

pub const CHECKPOINT_VERSION: u32 = 1;
const VELOCITY_TAG: &str = "optimizer.velocity";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub detector: Detector,
    pub velocity: Vec<f64>,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::parse(None, format!("checkpoint: {}", msg.into()))
}

impl Checkpoint {
    /// Freshly initialised training state for `config`.
    pub fn fresh(config: &RunConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let detector = Detector::init(config, &mut rng)?;
        let velocity = vec![0.0; detector.num_params()];
        Ok(Self { version: CHECKPOINT_VERSION, config: config.clone(), detector, velocity, iteration: 0, rng })
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::default();
        let m = &mut a.metadata;
        m.insert("checkpoint_version".into(), self.version.to_string());
        m.insert("config".into(), self.config.to_toml());
        m.insert("iteration".into(), self.iteration.to_string());
        m.insert("rng.seed".into(), hex(&self.rng.get_seed()));
        m.insert("rng.stream".into(), self.rng.get_stream().to_string());
        m.insert("rng.word_pos".into(), self.rng.get_word_pos().to_string());
        self.detector.visit("", &mut |name, dims, data| {
            a.tensors.push((name.to_string(), Tensor::from_vec(dims, data.to_vec()).expect("param dims match data")));
        });
        let v = Tensor::from_vec([1, 1, 1, self.velocity.len()], self.velocity.clone()).expect("vector shape");
        a.tensors.push((VELOCITY_TAG.into(), v));
        a
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_archive().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let a = TensorArchive::from_bytes(bytes)?;
        let meta = |k: &str| a.metadata.get(k).ok_or_else(|| corrupt(format!("missing metadata '{k}'")));
        let version: u32 = meta("checkpoint_version")?.parse().map_err(|_| corrupt("bad version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let config = RunConfig::from_toml(meta("config")?)?;
        let iteration = meta("iteration")?.parse().map_err(|_| corrupt("bad iteration"))?;
        let seed = unhex(meta("rng.seed")?).ok_or_else(|| corrupt("bad rng seed"))?;
        let stream = meta("rng.stream")?.parse().map_err(|_| corrupt("bad rng stream"))?;
        let word_pos = meta("rng.word_pos")?.parse().map_err(|_| corrupt("bad rng position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let mut detector = Detector::skeleton(&config)?;
        let mut problem = None;
        let mut used = 0;
        detector.visit_mut("", &mut |name, dims, data| {
            match a.get(name) {
                Some(t) if t.shape().dims() == dims => {
                    data.copy_from_slice(t.data());
                    used += 1;
                }
                Some(t) => {
                    problem.get_or_insert(format!("tensor '{name}' has shape {}, expected {dims:?}", t.shape()));
                }
                None => {
                    problem.get_or_insert(format!("tensor '{name}' is missing"));
                }
            }
        });
        if let Some(p) = problem {
            return Err(corrupt(p));
        }
        let velocity = a.get(VELOCITY_TAG).ok_or_else(|| corrupt("optimizer velocity missing"))?.data().to_vec();
        if velocity.len() != detector.num_params() {
            return Err(corrupt("optimizer velocity length does not match the parameters"));
        }
        if used + 1 != a.tensors.len() {
            return Err(corrupt("archive holds tensors the configured detector does not use"));
        }
        Ok(Self { version, config, detector, velocity, iteration, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }
}
