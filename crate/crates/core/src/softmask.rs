//! Soft masks from binary delineations.
//!
//! Each connected lesion is grown by unit dilations until its candidate
//! region reaches `target_volume_ratio` times the lesion volume. Added ring
//! voxels that are bright enough in the intensity volume get the soft label
//! `gamma`; darker ones stay 0. Annotated voxels always keep 1.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dim3, ExpertStack, VolumeGrid, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Face,
    #[serde(rename = "18")]
    Edge,
    #[serde(rename = "26")]
    Vertex,
}

impl Connectivity {
    pub fn from_neighbors(n: u32) -> Option<Self> {
        match n {
            6 => Some(Connectivity::Face),
            18 => Some(Connectivity::Edge),
            26 => Some(Connectivity::Vertex),
            _ => None,
        }
    }

    pub fn neighbors(&self) -> u32 {
        match self {
            Connectivity::Face => 6,
            Connectivity::Edge => 18,
            Connectivity::Vertex => 26,
        }
    }
}

/// Neighbor offsets of a 3x3x3 structuring element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuringElement {
    offsets: Vec<[isize; 3]>,
}

impl StructuringElement {
    pub fn new(connectivity: Connectivity) -> Self {
        let max_nonzero = match connectivity {
            Connectivity::Face => 1,
            Connectivity::Edge => 2,
            Connectivity::Vertex => 3,
        };
        let mut offsets = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let nonzero = [dx, dy, dz].iter().filter(|&&d| d != 0).count();
                    if nonzero >= 1 && nonzero <= max_nonzero {
                        offsets.push([dx, dy, dz]);
                    }
                }
            }
        }
        StructuringElement { offsets }
    }

    pub fn offsets(&self) -> &[[isize; 3]] {
        &self.offsets
    }

    fn for_each_neighbor(&self, dims: Dim3, t: usize, mut f: impl FnMut(usize)) {
        let (x, y, z) = dims.coords(t);
        for [dx, dy, dz] in &self.offsets {
            let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
            if dims.contains(nx, ny, nz) {
                f(nx as usize + dims.nx * (ny as usize + dims.ny * nz as usize));
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// Absolute intensity threshold.
    FixedValue(f64),
    /// Nearest-rank percentile of the intensity over the lesion's own voxels.
    LesionPercentile(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftMaskConfig {
    pub gamma: f64,
    pub target_volume_ratio: f64,
    pub threshold_mode: ThresholdMode,
    pub connectivity: Connectivity,
    pub max_dilation_iters: usize,
}

impl Default for SoftMaskConfig {
    fn default() -> Self {
        SoftMaskConfig {
            gamma: 0.3,
            target_volume_ratio: 1.2,
            threshold_mode: ThresholdMode::LesionPercentile(10.0),
            connectivity: Connectivity::Vertex,
            max_dilation_iters: 10,
        }
    }
}

impl SoftMaskConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.target_volume_ratio.is_finite() && self.target_volume_ratio >= 1.0) {
            return bad(format!(
                "target_volume_ratio must be at least 1, got {}",
                self.target_volume_ratio
            ));
        }
        match self.threshold_mode {
            ThresholdMode::LesionPercentile(p) if !(0.0..=100.0).contains(&p) => {
                return bad(format!("percentile must lie in [0, 100], got {p}"));
            }
            ThresholdMode::FixedValue(v) if !v.is_finite() => {
                return bad(format!("threshold must be finite, got {v}"));
            }
            _ => {}
        }
        if self.max_dilation_iters == 0 {
            return bad("max_dilation_iters must be at least 1".into());
        }
        Ok(())
    }
}

/// Component labeling of a binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    /// 0 for background, otherwise `1 + index` into `members`.
    pub labels: Vec<u32>,
    /// Voxel indices of each component, in discovery order.
    pub members: Vec<Vec<usize>>,
}

impl Components {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

fn ensure_binary(mask: &VolumeGrid) -> Result<()> {
    mask.ensure_kind(&[VolumeKind::BinaryLabel], "binary mask")
}

pub fn connected_components(mask: &VolumeGrid, connectivity: Connectivity) -> Result<Components> {
    ensure_binary(mask)?;
    let dims = mask.dims();
    let se = StructuringElement::new(connectivity);
    let data = mask.data();
    let mut labels = vec![0u32; data.len()];
    let mut members = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if data[start] != 1.0 || labels[start] != 0 {
            continue;
        }
        let id = members.len() as u32 + 1;
        let mut voxels = vec![start];
        labels[start] = id;
        queue.push_back(start);
        while let Some(t) = queue.pop_front() {
            se.for_each_neighbor(dims, t, |n| {
                if data[n] == 1.0 && labels[n] == 0 {
                    labels[n] = id;
                    voxels.push(n);
                    queue.push_back(n);
                }
            });
        }
        members.push(voxels);
    }
    Ok(Components { labels, members })
}

/// `iters` unit dilations, clipped at the grid boundary.
pub fn dilate(mask: &VolumeGrid, se: &StructuringElement, iters: usize) -> Result<VolumeGrid> {
    ensure_binary(mask)?;
    let dims = mask.dims();
    let mut current = mask.data().to_vec();
    let mut frontier: Vec<usize> = (0..current.len()).filter(|&t| current[t] == 1.0).collect();
    for _ in 0..iters {
        let mut next = Vec::new();
        for &t in &frontier {
            se.for_each_neighbor(dims, t, |n| {
                if current[n] == 0.0 {
                    current[n] = 1.0;
                    next.push(n);
                }
            });
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    VolumeGrid::new(dims, VolumeKind::BinaryLabel, current)
}

/// Nearest-rank percentile: the smallest value with at least `p`% of the
/// sample at or below it.
pub fn nearest_rank_percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    values[rank.clamp(1, n) - 1]
}

/// What happened to one lesion while building its soft mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentReport {
    pub voxels: usize,
    pub dilation_iters: usize,
    /// Lesion plus every voxel reached by the dilations.
    pub dilated_volume: usize,
    pub threshold: f64,
    pub ring_voxels: usize,
    /// Ring voxels that received the soft label.
    pub soft_voxels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub mask: VolumeGrid,
    pub components: Vec<ComponentReport>,
}

pub fn build_soft_mask(
    binary: &VolumeGrid,
    flair: &VolumeGrid,
    cfg: &SoftMaskConfig,
) -> Result<VolumeGrid> {
    Ok(build_soft_mask_with_report(binary, flair, cfg)?.mask)
}

pub fn build_soft_mask_with_report(
    binary: &VolumeGrid,
    flair: &VolumeGrid,
    cfg: &SoftMaskConfig,
) -> Result<SoftMask> {
    cfg.validate()?;
    ensure_binary(binary)?;
    flair.ensure_kind(&[VolumeKind::Intensity], "intensity volume")?;
    binary.ensure_same_dims(flair)?;

    let dims = binary.dims();
    let original = binary.data();
    let intensity = flair.data();
    let se = StructuringElement::new(cfg.connectivity);
    let comps = connected_components(binary, cfg.connectivity)?;

    let mut out = original.to_vec();
    // which component last visited a voxel, to dilate each lesion on its own
    let mut visited = vec![0u32; original.len()];
    let mut reports = Vec::with_capacity(comps.len());

    for (c, voxels) in comps.members.iter().enumerate() {
        let stamp = c as u32 + 1;
        for &t in voxels {
            visited[t] = stamp;
        }
        let target = cfg.target_volume_ratio * voxels.len() as f64;
        let mut ring = Vec::new();
        let mut frontier = voxels.clone();
        let mut iters = 0;
        while ((voxels.len() + ring.len()) as f64) < target && iters < cfg.max_dilation_iters {
            let mut next = Vec::new();
            for &t in &frontier {
                se.for_each_neighbor(dims, t, |n| {
                    if visited[n] != stamp {
                        visited[n] = stamp;
                        next.push(n);
                    }
                });
            }
            iters += 1;
            if next.is_empty() {
                break;
            }
            ring.extend_from_slice(&next);
            frontier = next;
        }

        let threshold = match cfg.threshold_mode {
            ThresholdMode::FixedValue(v) => v,
            ThresholdMode::LesionPercentile(p) => {
                let mut values: Vec<f64> = voxels.iter().map(|&t| intensity[t]).collect();
                nearest_rank_percentile(&mut values, p)
            }
        };

        let mut ring_voxels = 0;
        let mut soft_voxels = 0;
        for &t in &ring {
            // annotated voxels of other lesions are never ring voxels
            if original[t] == 1.0 {
                continue;
            }
            ring_voxels += 1;
            if intensity[t] >= threshold {
                soft_voxels += 1;
                out[t] = out[t].max(cfg.gamma);
            }
        }
        reports.push(ComponentReport {
            voxels: voxels.len(),
            dilation_iters: iters,
            dilated_volume: voxels.len() + ring.len(),
            threshold,
            ring_voxels,
            soft_voxels,
        });
    }

    Ok(SoftMask {
        mask: VolumeGrid::new(dims, VolumeKind::SoftLabel, out)?,
        components: reports,
    })
}

/// Applies [`build_soft_mask`] to every expert, keeping order and ids.
pub fn build_soft_stack(
    stack: &ExpertStack,
    flair: &VolumeGrid,
    cfg: &SoftMaskConfig,
) -> Result<ExpertStack> {
    stack.ensure_kind(VolumeKind::BinaryLabel)?;
    let grids = stack
        .experts()
        .iter()
        .map(|g| build_soft_mask(g, flair, cfg))
        .collect::<Result<Vec<_>>>()?;
    ExpertStack::new(grids, stack.ids().to_vec())
}
