//! Versioned, checksummed binary container for a complete run state.
//!
//! Layout: magic, format version, payload length, CRC-32 of the payload,
//! payload. All integers little-endian; floats stored as raw bits so a
//! save/load/save cycle is byte-identical. The payload embeds the resolved
//! config as TOML text; unknown versions and corrupt containers are refused.

use std::path::Path;

use verge_core::gassom::{DictionarySet, SubspaceDictionary};
use verge_core::learner::{
    Agent, CriticState, HierarchicalAgent, NetworkUnit, ParallelAgent, RewardNormalizer,
    NUM_REWARD_CHANNELS,
};
use verge_core::policy::{
    PolicyNetwork, DIM_FOVEAL, DIM_INNER, DIM_OUTER, DIM_PARALLEL, NUM_ACTIONS, NUM_OPTIONS,
};
use verge_core::pyramid::Scale;

use crate::config::{Config, ModelKind};
use crate::protocol::RunState;
use crate::HarnessError;

const MAGIC: &[u8; 8] = b"VERGCKPT";
pub const FORMAT_VERSION: u32 = 1;

fn err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(msg.into())
}

/// CRC-32 (IEEE 802.3 polynomial, reflected).
pub fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ u32::from(b)) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.u32(v.to_bits());
    }

    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    fn f32_slice(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f32(x);
        }
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], HarnessError> {
        if self.pos + n > self.data.len() {
            return Err(err("truncated payload"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, HarnessError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, HarnessError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, HarnessError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, HarnessError> {
        Ok(f32::from_bits(self.u32()?))
    }

    fn f64(&mut self) -> Result<f64, HarnessError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn f32_vec(&mut self, expect: usize) -> Result<Vec<f32>, HarnessError> {
        let n = self.u64()? as usize;
        if n != expect {
            return Err(err(format!("vector length {n}, expected {expect}")));
        }
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(self.f32()?);
        }
        Ok(v)
    }

    fn str(&mut self) -> Result<String, HarnessError> {
        let n = self.u64()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| err("config text is not UTF-8"))
    }

    fn finished(&self) -> bool {
        self.pos == self.data.len()
    }
}

fn write_dictionary(w: &mut Writer, d: &SubspaceDictionary<f32>) {
    w.u64(d.step_count());
    w.f32_slice(d.bases());
}

fn write_unit(w: &mut Writer, u: &NetworkUnit<f32>) {
    w.f32(u.net.temperature());
    w.f32_slice(u.net.weights());
    w.f32_slice(&u.critic.v);
    w.f32_slice(&u.critic.w);
    w.f32_slice(&u.critic.z_v);
    w.f32_slice(&u.critic.z_w);
}

fn write_normalizer(w: &mut Writer, n: &RewardNormalizer) {
    let (m1, m2, decay) = n.state();
    for v in m1.into_iter().chain(m2).chain(decay) {
        w.f64(v);
    }
}

/// Serializes a run state to the container format.
pub fn encode(state: &RunState) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(&state.config_text);
    w.u64(state.master_seed);
    w.u8(match state.config.run.model {
        ModelKind::Parallel => 0,
        ModelKind::Hierarchical => 1,
    });
    w.u64(state.total_steps);
    w.u64(state.scene_index);
    w.u64(state.fixation_index);
    write_dictionary(&mut w, &state.dicts.fine);
    write_dictionary(&mut w, &state.dicts.medium);
    write_dictionary(&mut w, &state.dicts.coarse);
    match &state.agent {
        Agent::Parallel(a) => {
            write_unit(&mut w, &a.unit);
            write_normalizer(&mut w, &a.normalizer);
        }
        Agent::Hierarchical(a) => {
            write_unit(&mut w, &a.top);
            write_unit(&mut w, &a.foveal);
            write_unit(&mut w, &a.inner);
            write_unit(&mut w, &a.outer);
            write_normalizer(&mut w, &a.normalizer);
        }
    }
    let payload = w.buf;
    let mut out = Vec::with_capacity(payload.len() + 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

fn read_dictionary(
    r: &mut Reader,
    scale: Scale,
    config: &Config,
) -> Result<SubspaceDictionary<f32>, HarnessError> {
    use verge_core::gassom::{DICT_SIZE, SUBSPACE_DIM};
    use verge_core::pyramid::PATCH_DIM;
    let step_count = r.u64()?;
    let bases = r.f32_vec(DICT_SIZE * SUBSPACE_DIM * PATCH_DIM)?;
    Ok(SubspaceDictionary::from_parts(
        scale,
        bases,
        config.gassom_params(),
        step_count,
    ))
}

fn read_unit(
    r: &mut Reader,
    actions: usize,
    dim: usize,
) -> Result<NetworkUnit<f32>, HarnessError> {
    let temperature = r.f32()?;
    let weights = r.f32_vec(actions * dim)?;
    let v = r.f32_vec(dim)?;
    let w = r.f32_vec(actions * dim)?;
    let z_v = r.f32_vec(dim)?;
    let z_w = r.f32_vec(actions * dim)?;
    Ok(NetworkUnit {
        net: PolicyNetwork::from_parts(actions, dim, temperature, weights),
        critic: CriticState { v, w, z_v, z_w },
    })
}

fn read_normalizer(r: &mut Reader, config: &Config) -> Result<RewardNormalizer, HarnessError> {
    let mut m1 = [0.0f64; NUM_REWARD_CHANNELS];
    let mut m2 = [0.0f64; NUM_REWARD_CHANNELS];
    let mut decay = [0.0f64; NUM_REWARD_CHANNELS];
    for part in [&mut m1, &mut m2, &mut decay] {
        for v in part.iter_mut() {
            *v = r.f64()?;
        }
    }
    Ok(RewardNormalizer::from_parts(config.normalizer_params(), m1, m2, decay))
}

/// Parses a container produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<RunState, HarnessError> {
    if bytes.len() < 24 {
        return Err(err("file shorter than the container header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(err("bad magic; not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(err(format!(
            "unsupported format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let stored_crc = u32::from_le_bytes(bytes[20..24].try_into().unwrap());
    let payload = &bytes[24..];
    if payload.len() != len {
        return Err(err(format!(
            "payload length {} does not match header {len}",
            payload.len()
        )));
    }
    if crc32(payload) != stored_crc {
        return Err(err("checksum mismatch; checkpoint is corrupt"));
    }

    let mut r = Reader::new(payload);
    let config_text = r.str()?;
    let config = Config::from_toml(&config_text)
        .map_err(|e| err(format!("embedded config is invalid: {e}")))?;
    let master_seed = r.u64()?;
    let kind = r.u8()?;
    let expected_kind = match config.run.model {
        ModelKind::Parallel => 0,
        ModelKind::Hierarchical => 1,
    };
    if kind != expected_kind {
        return Err(err("model kind disagrees with the embedded config"));
    }
    let total_steps = r.u64()?;
    let scene_index = r.u64()?;
    let fixation_index = r.u64()?;
    let dicts = DictionarySet {
        fine: read_dictionary(&mut r, Scale::Fine, &config)?,
        medium: read_dictionary(&mut r, Scale::Medium, &config)?,
        coarse: read_dictionary(&mut r, Scale::Coarse, &config)?,
    };
    let agent = match config.run.model {
        ModelKind::Parallel => {
            let unit = read_unit(&mut r, NUM_ACTIONS, DIM_PARALLEL)?;
            let normalizer = read_normalizer(&mut r, &config)?;
            Agent::Parallel(ParallelAgent { unit, normalizer, nac: config.nac_params() })
        }
        ModelKind::Hierarchical => {
            let top = read_unit(&mut r, NUM_OPTIONS, DIM_PARALLEL)?;
            let foveal = read_unit(&mut r, NUM_ACTIONS, DIM_FOVEAL)?;
            let inner = read_unit(&mut r, NUM_ACTIONS, DIM_INNER)?;
            let outer = read_unit(&mut r, NUM_ACTIONS, DIM_OUTER)?;
            let normalizer = read_normalizer(&mut r, &config)?;
            Agent::Hierarchical(HierarchicalAgent {
                top,
                foveal,
                inner,
                outer,
                normalizer,
                nac: config.nac_params(),
            })
        }
    };
    if !r.finished() {
        return Err(err("trailing bytes after the payload"));
    }
    Ok(RunState {
        config,
        config_text,
        master_seed,
        dicts,
        agent,
        total_steps,
        scene_index,
        fixation_index,
    })
}

/// Atomic save: the target path either keeps its previous content or holds
/// the complete new container, never a partial write.
pub fn save(state: &RunState, path: &Path) -> Result<(), HarnessError> {
    let bytes = encode(state);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<RunState, HarnessError> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}
