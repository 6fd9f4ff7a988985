//! Container format.
//!
//! All integers little-endian. Layout (version 1):
//!
//! ```text
//! magic          4   "FPCA"
//! version        u8  1
//! config block   102 bytes, see `write_config`
//! config hash    u64 FNV-1a of the config block
//! point count    u64
//! patch count    u32
//! per patch:
//!   grid width, grid height, expanded width, expanded height   u32 x4
//!   geometry checksum                                          u64
//!   payload length                                             u64
//!   payload                                                    bytes
//! ```

use crate::cloud::Point3;
use crate::error::{Error, Result};
use crate::fold::{ModelDims, TrainConfig};
use crate::image::{CodecChoice, CompressedImage};
use crate::pipeline::PipelineConfig;
use crate::refine::RefineConfig;

pub const MAGIC: [u8; 4] = *b"FPCA";
pub const VERSION: u8 = 1;
pub const CONFIG_BLOCK_LEN: usize = 102;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes
        .into_iter()
        .fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// FNV-1a over the coordinates rounded to `f32`, in point order.
pub fn geometry_checksum(points: &[Point3]) -> u64 {
    fnv1a(points.iter().flatten().flat_map(|&v| (v as f32).to_le_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRecord {
    pub grid_width: u32,
    pub grid_height: u32,
    pub expanded_width: u32,
    pub expanded_height: u32,
    pub checksum: u64,
    pub payload: Vec<u8>,
}

impl PatchRecord {
    pub fn compressed_image(&self, codec: CodecChoice) -> CompressedImage {
        CompressedImage {
            codec,
            width: self.expanded_width,
            height: self.expanded_height,
            payload: self.payload.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub config: PipelineConfig,
    pub num_points: u64,
    pub patches: Vec<PatchRecord>,
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} = {v} does not fit in 32 bits")))
}

pub fn write_config(cfg: &PipelineConfig) -> Result<Vec<u8>> {
    let mut b = Vec::with_capacity(CONFIG_BLOCK_LEN);
    let t = &cfg.train;
    b.extend_from_slice(&u32_of(t.iterations, "training iterations")?.to_le_bytes());
    b.extend_from_slice(&t.learning_rate.to_le_bytes());
    b.extend_from_slice(&t.beta1.to_le_bytes());
    b.extend_from_slice(&t.beta2.to_le_bytes());
    b.extend_from_slice(&t.epsilon.to_le_bytes());
    b.extend_from_slice(&t.seed.to_le_bytes());
    for w in t.dims.encoder.iter().chain(&t.dims.folding_hidden) {
        b.extend_from_slice(&u32_of(*w, "layer width")?.to_le_bytes());
    }
    b.extend_from_slice(&cfg.refine.alpha.to_le_bytes());
    b.extend_from_slice(&u32_of(cfg.refine.iterations, "refine iterations")?.to_le_bytes());
    b.extend_from_slice(&u32_of(cfg.k, "k")?.to_le_bytes());
    b.extend_from_slice(&cfg.delta_min.to_le_bytes());
    b.extend_from_slice(&u32_of(cfg.max_rounds, "max rounds")?.to_le_bytes());
    b.push(cfg.codec.id());
    b.push(cfg.codec.qp().unwrap_or(0));
    b.extend_from_slice(&u32_of(cfg.max_points, "max points")?.to_le_bytes());
    debug_assert_eq!(b.len(), CONFIG_BLOCK_LEN);
    Ok(b)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Bitstream(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_config(block: &[u8]) -> Result<PipelineConfig> {
    let mut r = Reader { bytes: block, pos: 0 };
    let iterations = r.u32()? as usize;
    let learning_rate = r.f64()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let epsilon = r.f64()?;
    let seed = r.u64()?;
    let mut encoder = [0usize; 4];
    for w in &mut encoder {
        *w = r.u32()? as usize;
    }
    let folding_hidden = [r.u32()? as usize, r.u32()? as usize];
    let alpha = r.f64()?;
    let refine_iterations = r.u32()? as usize;
    let k = r.u32()? as usize;
    let delta_min = r.f64()?;
    let max_rounds = r.u32()? as usize;
    let codec_id = r.u8()?;
    let qp = r.u8()?;
    let max_points = r.u32()? as usize;
    let cfg = PipelineConfig {
        train: TrainConfig {
            iterations,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            seed,
            dims: ModelDims { encoder, folding_hidden },
        },
        refine: RefineConfig {
            alpha,
            iterations: refine_iterations,
        },
        k,
        delta_min,
        max_rounds,
        codec: CodecChoice::from_parts(codec_id, qp).map_err(|e| Error::Bitstream(e.to_string()))?,
        max_points,
    };
    cfg.validate().map_err(|e| Error::Bitstream(e.to_string()))?;
    Ok(cfg)
}

impl Bitstream {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = write_config(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&config);
        out.extend_from_slice(&fnv1a(config.iter().copied()).to_le_bytes());
        out.extend_from_slice(&self.num_points.to_le_bytes());
        out.extend_from_slice(&u32_of(self.patches.len(), "patch count")?.to_le_bytes());
        for p in &self.patches {
            for v in [p.grid_width, p.grid_height, p.expanded_width, p.expanded_height] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&p.checksum.to_le_bytes());
            out.extend_from_slice(&(p.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&p.payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Bitstream("bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Bitstream(format!("unsupported version {version}")));
        }
        let block = r.take(CONFIG_BLOCK_LEN)?;
        let hash = r.u64()?;
        if hash != fnv1a(block.iter().copied()) {
            return Err(Error::Bitstream("config hash mismatch".into()));
        }
        let config = read_config(block)?;
        let num_points = r.u64()?;
        let count = r.u32()? as usize;
        let mut patches = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let grid_width = r.u32()?;
            let grid_height = r.u32()?;
            let expanded_width = r.u32()?;
            let expanded_height = r.u32()?;
            let checksum = r.u64()?;
            let len = usize::try_from(r.u64()?).map_err(|_| Error::Bitstream("payload too large".into()))?;
            let payload = r.take(len)?.to_vec();
            patches.push(PatchRecord {
                grid_width,
                grid_height,
                expanded_width,
                expanded_height,
                checksum,
                payload,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Bitstream(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Bitstream {
            config,
            num_points,
            patches,
        })
    }
}
