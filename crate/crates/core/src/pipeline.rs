//! End-to-end encoder and decoder.
//!
//! The decoder receives geometry and the bitstream only. It re-runs
//! normalization, training, refinement and grid expansion from the geometry
//! and the configuration in the header, which reproduces the encoder's
//! mapping bit for bit because every numeric stage reduces in a fixed order.

use rayon::prelude::*;

use crate::bitstream::{geometry_checksum, Bitstream, PatchRecord};
use crate::cloud::{normalize_positions, segment_indices, NormalizeTransform, Point3, PointCloud, Rgb};
use crate::error::{Error, Result};
use crate::fold::{train, Grid, TrainConfig};
use crate::image::{bits_per_point, compress_with, decompress_with, y_psnr, CodecChoice, CompressedImage, ExternalCodec};
use crate::knn::SpatialIndex;
use crate::mapping::{
    build_mapping, decode_attributes, expand_grid, map_attributes, AttributeImage, Expansion, FoldedGrid,
    MappingTable, DEFAULT_DELTA_MIN, DEFAULT_MAX_ROUNDS,
};
use crate::refine::{refine, RefineConfig};

pub const DEFAULT_K: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub k: usize,
    pub delta_min: f64,
    pub max_rounds: usize,
    pub codec: CodecChoice,
    /// Largest patch size; 0 disables segmentation.
    pub max_points: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train: TrainConfig::default(),
            refine: RefineConfig::default(),
            k: DEFAULT_K,
            delta_min: DEFAULT_DELTA_MIN,
            max_rounds: DEFAULT_MAX_ROUNDS,
            codec: CodecChoice::LosslessBaseline,
            max_points: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.refine.validate()?;
        self.codec.validate()?;
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be positive".into()));
        }
        if self.delta_min.is_nan() || self.delta_min < 0.0 {
            return Err(Error::InvalidArgument("delta_min must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Point indices of each patch, in the order patches are coded.
pub fn patch_indices(points: &[Point3], max_points: usize) -> Vec<Vec<usize>> {
    if max_points == 0 || points.len() <= max_points {
        vec![(0..points.len()).collect()]
    } else {
        segment_indices(points, max_points)
    }
}

/// Geometry-derived state of one patch; identical on both sides of the codec.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchState {
    pub transform: NormalizeTransform,
    pub normalized: Vec<Point3>,
    pub grid: Grid,
    pub folded: Vec<Point3>,
    pub refined: Vec<Point3>,
    pub expansion: Expansion,
}

pub fn reconstruct_patch(positions: &[Point3], cfg: &PipelineConfig, patch: usize) -> Result<PatchState> {
    let (normalized, transform) = normalize_positions(positions).map_err(|e| e.in_stage("normalize", patch))?;
    let trained = train(&normalized, &cfg.train).map_err(|e| e.in_stage("train", patch))?;
    let refined = refine(&trained.reconstruction, &normalized, &trained.grid, &cfg.refine)
        .map_err(|e| e.in_stage("refine", patch))?;
    let folded_grid = FoldedGrid::new(trained.grid.width, trained.grid.height, refined.clone())
        .map_err(|e| e.in_stage("expand", patch))?;
    let expansion = expand_grid(folded_grid, &normalized, cfg.k, cfg.delta_min, cfg.max_rounds)
        .map_err(|e| e.in_stage("expand", patch))?;
    Ok(PatchState {
        transform,
        normalized,
        grid: trained.grid,
        folded: trained.reconstruction,
        refined,
        expansion,
    })
}

/// Encoder-side products of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPatch {
    pub indices: Vec<usize>,
    pub state: PatchState,
    pub image: AttributeImage,
    pub compressed: CompressedImage,
}

fn encode_patch(pc: &PointCloud, indices: Vec<usize>, cfg: &PipelineConfig, ext: &ExternalCodec, patch: usize) -> Result<EncodedPatch> {
    let positions: Vec<Point3> = indices.iter().map(|&i| pc.positions()[i]).collect();
    let colors: Vec<Rgb> = indices.iter().map(|&i| pc.colors()[i]).collect();
    let state = reconstruct_patch(&positions, cfg, patch)?;
    let x_index = SpatialIndex::build(&state.normalized).map_err(|e| e.in_stage("map", patch))?;
    let image = map_attributes(&colors, &state.expansion.table, &state.expansion.grid, &x_index)
        .map_err(|e| e.in_stage("map", patch))?;
    let compressed = compress_with(&image, cfg.codec, ext).map_err(|e| e.in_stage("compress", patch))?;
    Ok(EncodedPatch {
        indices,
        state,
        image,
        compressed,
    })
}

fn record(p: &EncodedPatch, positions: &[Point3]) -> PatchRecord {
    let pts: Vec<Point3> = p.indices.iter().map(|&i| positions[i]).collect();
    PatchRecord {
        grid_width: p.state.grid.width as u32,
        grid_height: p.state.grid.height as u32,
        expanded_width: p.compressed.width,
        expanded_height: p.compressed.height,
        checksum: geometry_checksum(&pts),
        payload: p.compressed.payload.clone(),
    }
}

/// Encodes and also returns the per-patch intermediate products.
pub fn encode_detailed(pc: &PointCloud, cfg: &PipelineConfig, ext: &ExternalCodec) -> Result<(Bitstream, Vec<EncodedPatch>)> {
    cfg.validate()?;
    let patches: Vec<EncodedPatch> = patch_indices(pc.positions(), cfg.max_points)
        .into_par_iter()
        .enumerate()
        .map(|(i, idx)| encode_patch(pc, idx, cfg, ext, i))
        .collect::<Result<_>>()?;
    let bs = Bitstream {
        config: *cfg,
        num_points: pc.len() as u64,
        patches: patches.iter().map(|p| record(p, pc.positions())).collect(),
    };
    Ok((bs, patches))
}

pub fn encode(pc: &PointCloud, cfg: &PipelineConfig) -> Result<Bitstream> {
    Ok(encode_detailed(pc, cfg, &ExternalCodec::from_env())?.0)
}

/// Decoder-side products of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPatch {
    pub indices: Vec<usize>,
    pub state: PatchState,
    pub image: AttributeImage,
}

pub fn decode_detailed(geometry: &[Point3], bs: &Bitstream, ext: &ExternalCodec) -> Result<(Vec<Rgb>, Vec<DecodedPatch>)> {
    if geometry.len() as u64 != bs.num_points {
        return Err(Error::ChecksumMismatch {
            patch: 0,
            expected: bs.num_points,
            actual: geometry.len() as u64,
        });
    }
    let cfg = &bs.config;
    let groups = patch_indices(geometry, cfg.max_points);
    if groups.len() != bs.patches.len() {
        return Err(Error::DeterminismViolation {
            patch: 0,
            msg: format!("{} patches in the bitstream, geometry segments into {}", bs.patches.len(), groups.len()),
        });
    }
    // checksums first, so bad geometry is refused before any training
    for (i, (idx, rec)) in groups.iter().zip(&bs.patches).enumerate() {
        let pts: Vec<Point3> = idx.iter().map(|&j| geometry[j]).collect();
        let actual = geometry_checksum(&pts);
        if actual != rec.checksum {
            return Err(Error::ChecksumMismatch {
                patch: i,
                expected: rec.checksum,
                actual,
            });
        }
    }
    let decoded: Vec<DecodedPatch> = groups
        .into_par_iter()
        .zip(bs.patches.par_iter())
        .enumerate()
        .map(|(i, (indices, rec))| {
            let positions: Vec<Point3> = indices.iter().map(|&j| geometry[j]).collect();
            let state = reconstruct_patch(&positions, cfg, i)?;
            let dims = (state.grid.width as u32, state.grid.height as u32, state.expansion.grid.width as u32, state.expansion.grid.height as u32);
            let header = (rec.grid_width, rec.grid_height, rec.expanded_width, rec.expanded_height);
            if dims != header {
                return Err(Error::DeterminismViolation {
                    patch: i,
                    msg: format!("reconstructed grid dims {dims:?} differ from header {header:?}"),
                });
            }
            let image = decompress_with(&rec.compressed_image(cfg.codec), ext).map_err(|e| e.in_stage("decompress", i))?;
            Ok(DecodedPatch { indices, state, image })
        })
        .collect::<Result<_>>()?;
    let mut colors = vec![[0u8; 3]; geometry.len()];
    for (i, p) in decoded.iter().enumerate() {
        let attrs = decode_attributes(&p.image, &p.state.expansion.table).map_err(|e| e.in_stage("inverse-map", i))?;
        for (&j, c) in p.indices.iter().zip(attrs) {
            colors[j] = c;
        }
    }
    Ok((colors, decoded))
}

/// Attributes for `geometry`, in its point order.
pub fn decode(geometry: &[Point3], bs: &Bitstream) -> Result<Vec<Rgb>> {
    Ok(decode_detailed(geometry, bs, &ExternalCodec::from_env())?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Folded,
    Refined,
    Optimized,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Folded, Stage::Refined, Stage::Optimized];

    pub fn label(&self) -> &'static str {
        match self {
            Stage::Folded => "folded",
            Stage::Refined => "refined",
            Stage::Optimized => "optimized",
        }
    }
}

/// The image a given stage would code for one patch, with its mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct StageImage {
    pub grid_width: usize,
    pub grid_height: usize,
    pub table: MappingTable,
    pub image: AttributeImage,
}

/// Mapping of one patch after the given stage. Folded and refined stages use
/// plain nearest-neighbor mapping; the optimized stage uses the expanded grid.
pub fn stage_image(state: &PatchState, colors: &[Rgb], stage: Stage) -> Result<StageImage> {
    let x_index = SpatialIndex::build(&state.normalized)?;
    let (grid, table) = match stage {
        Stage::Folded | Stage::Refined => {
            let pts = if stage == Stage::Folded { &state.folded } else { &state.refined };
            let g = FoldedGrid::new(state.grid.width, state.grid.height, pts.clone())?;
            let t = build_mapping(&state.normalized, &g.points, 1)?;
            (g, t)
        }
        Stage::Optimized => (state.expansion.grid.clone(), state.expansion.table.clone()),
    };
    let image = map_attributes(colors, &table, &grid, &x_index)?;
    Ok(StageImage {
        grid_width: state.grid.width,
        grid_height: state.grid.height,
        table,
        image,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    /// Mapping-only Y-PSNR over the whole cloud (no image codec).
    pub y_psnr: f64,
    /// Occupancy value → cell count, summed over patches.
    pub histogram: Vec<usize>,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub stages: Vec<StageReport>,
}

/// Reconstructs every patch of a cloud.
pub fn reconstruct_all(pc: &PointCloud, cfg: &PipelineConfig) -> Result<Vec<(Vec<usize>, PatchState)>> {
    cfg.validate()?;
    patch_indices(pc.positions(), cfg.max_points)
        .into_par_iter()
        .enumerate()
        .map(|(i, idx)| {
            let pts: Vec<Point3> = idx.iter().map(|&j| pc.positions()[j]).collect();
            Ok((idx, reconstruct_patch(&pts, cfg, i)?))
        })
        .collect()
}

pub fn ablation_from_states(pc: &PointCloud, states: &[(Vec<usize>, PatchState)]) -> Result<AblationReport> {
    let mut stages = Vec::with_capacity(3);
    for stage in Stage::ALL {
        let mut decoded = vec![[0u8; 3]; pc.len()];
        let mut histogram: Vec<usize> = Vec::new();
        let mut cells = 0;
        for (idx, state) in states {
            let colors: Vec<Rgb> = idx.iter().map(|&j| pc.colors()[j]).collect();
            let si = stage_image(state, &colors, stage)?;
            for (&j, c) in idx.iter().zip(decode_attributes(&si.image, &si.table)?) {
                decoded[j] = c;
            }
            let h = si.table.histogram();
            if h.len() > histogram.len() {
                histogram.resize(h.len(), 0);
            }
            for (a, b) in histogram.iter_mut().zip(h) {
                *a += b;
            }
            cells += si.table.num_cells();
        }
        stages.push(StageReport {
            stage,
            y_psnr: y_psnr(pc.colors(), &decoded)?,
            histogram,
            cells,
        });
    }
    Ok(AblationReport { stages })
}

/// Mapping-only Y-PSNR of every stage in `Stage::ALL`.
pub fn run_stage_ablation(pc: &PointCloud, cfg: &PipelineConfig) -> Result<AblationReport> {
    let states = reconstruct_all(pc, cfg)?;
    ablation_from_states(pc, &states)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdResult {
    pub bytes: usize,
    pub bpp: f64,
    pub y_psnr: f64,
}

/// Rate and distortion of coding the given stage's images with `codec`.
/// The rate counts a full container holding those images.
pub fn evaluate_stage(
    pc: &PointCloud,
    cfg: &PipelineConfig,
    states: &[(Vec<usize>, PatchState)],
    stage: Stage,
    codec: CodecChoice,
    ext: &ExternalCodec,
) -> Result<RdResult> {
    let mut decoded = vec![[0u8; 3]; pc.len()];
    let mut patches = Vec::with_capacity(states.len());
    for (i, (idx, state)) in states.iter().enumerate() {
        let colors: Vec<Rgb> = idx.iter().map(|&j| pc.colors()[j]).collect();
        let si = stage_image(state, &colors, stage).map_err(|e| e.in_stage("map", i))?;
        let comp = compress_with(&si.image, codec, ext).map_err(|e| e.in_stage("compress", i))?;
        let image = decompress_with(&comp, ext).map_err(|e| e.in_stage("decompress", i))?;
        for (&j, c) in idx.iter().zip(decode_attributes(&image, &si.table)?) {
            decoded[j] = c;
        }
        let pts: Vec<Point3> = idx.iter().map(|&j| pc.positions()[j]).collect();
        patches.push(PatchRecord {
            grid_width: si.grid_width as u32,
            grid_height: si.grid_height as u32,
            expanded_width: comp.width,
            expanded_height: comp.height,
            checksum: geometry_checksum(&pts),
            payload: comp.payload,
        });
    }
    let bs = Bitstream {
        config: PipelineConfig { codec, ..*cfg },
        num_points: pc.len() as u64,
        patches,
    };
    let bytes = bs.to_bytes()?.len();
    Ok(RdResult {
        bytes,
        bpp: bits_per_point(bytes, pc.len())?,
        y_psnr: y_psnr(pc.colors(), &decoded)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fold::ModelDims;
    use crate::synth::plane;

    fn small_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.train.iterations = 30;
        cfg.train.dims = ModelDims {
            encoder: [16; 4],
            folding_hidden: [16, 16],
        };
        cfg
    }

    fn encoder_view(pc: &PointCloud, enc: &[EncodedPatch]) -> Vec<Rgb> {
        let mut out = vec![[0u8; 3]; pc.len()];
        for p in enc {
            for (&j, c) in p.indices.iter().zip(decode_attributes(&p.image, &p.state.expansion.table).unwrap()) {
                out[j] = c;
            }
        }
        out
    }

    #[test]
    fn decoder_reproduces_encoder_mapping() {
        let pc = plane(120, 5);
        let cfg = small_config();
        let (bs, enc) = encode_detailed(&pc, &cfg, &ExternalCodec::from_env()).unwrap();
        let parsed = Bitstream::from_bytes(&bs.to_bytes().unwrap()).unwrap();
        let decoded = decode(pc.positions(), &parsed).unwrap();
        assert_eq!(decoded, encoder_view(&pc, &enc));
        if enc[0].state.expansion.table.is_lossless() {
            assert_eq!(decoded, pc.colors());
        }
    }

    #[test]
    fn segmented_round_trip_restores_point_order() {
        let pc = plane(150, 6);
        let cfg = PipelineConfig {
            max_points: 60,
            ..small_config()
        };
        let (bs, enc) = encode_detailed(&pc, &cfg, &ExternalCodec::from_env()).unwrap();
        assert_eq!(bs.patches.len(), patch_indices(pc.positions(), 60).len());
        assert!(bs.patches.len() > 1);
        assert_eq!(decode(pc.positions(), &bs).unwrap(), encoder_view(&pc, &enc));
    }

    #[test]
    fn wrong_geometry_is_a_checksum_error() {
        let pc = plane(80, 7);
        let bs = encode(&pc, &small_config()).unwrap();
        let mut geo = pc.positions().to_vec();
        geo[3][0] += 0.25;
        assert!(matches!(decode(&geo, &bs), Err(Error::ChecksumMismatch { .. })));
        assert!(matches!(decode(&geo[1..], &bs), Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn tampered_dims_are_a_determinism_violation() {
        let pc = plane(80, 8);
        let mut bs = encode(&pc, &small_config()).unwrap();
        bs.patches[0].expanded_width += 1;
        assert!(matches!(decode(pc.positions(), &bs), Err(Error::DeterminismViolation { .. })));
    }

    #[test]
    fn stage_rd_matches_lossless_container() {
        let pc = plane(100, 9);
        let cfg = small_config();
        let ext = ExternalCodec::from_env();
        let states = reconstruct_all(&pc, &cfg).unwrap();
        let rd = evaluate_stage(&pc, &cfg, &states, Stage::Optimized, CodecChoice::LosslessBaseline, &ext).unwrap();
        let bs = encode(&pc, &cfg).unwrap();
        assert_eq!(rd.bytes, bs.to_bytes().unwrap().len());
        assert!(rd.y_psnr.is_infinite());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let pc = plane(20, 1);
        let cfg = PipelineConfig { k: 0, ..small_config() };
        assert!(matches!(encode(&pc, &cfg), Err(Error::InvalidArgument(_))));
    }
}
