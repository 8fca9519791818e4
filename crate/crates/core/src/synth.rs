//! Synthetic phantoms and simulated raters.
//!
//! All randomness comes from counter streams keyed by the seed, a stream id
//! and the voxel index, so outputs do not depend on scheduling.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::staple::RaterParams;
use crate::volume::{Dim3, ExpertStack, VolumeGrid, VolumeKind};

const PHANTOM_STREAM: u64 = 0x5048;
const LAYOUT_STREAM: u64 = 0x4C59;
const RATER_STREAM: u64 = 0x5254_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lesion {
    pub center: [usize; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dim3,
    #[serde(default)]
    pub lesions: Vec<Lesion>,
    #[serde(default = "default_background")]
    pub background_intensity: f64,
    #[serde(default = "default_lesion_intensity")]
    pub lesion_intensity: f64,
    #[serde(default)]
    pub intensity_noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_background() -> f64 {
    1.0
}

fn default_lesion_intensity() -> f64 {
    2.0
}

impl PhantomSpec {
    pub fn new(dims: Dim3, lesions: Vec<Lesion>, seed: u64) -> Self {
        PhantomSpec {
            dims,
            lesions,
            background_intensity: default_background(),
            lesion_intensity: default_lesion_intensity(),
            intensity_noise_sd: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Dim3::new(self.dims.nx, self.dims.ny, self.dims.nz)?;
        if !(self.lesion_intensity.is_finite() && self.lesion_intensity > self.background_intensity)
        {
            return Err(Error::InvalidConfig(format!(
                "lesion_intensity ({}) must exceed background_intensity ({})",
                self.lesion_intensity, self.background_intensity
            )));
        }
        if !(self.intensity_noise_sd >= 0.0 && self.intensity_noise_sd.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "intensity_noise_sd must be a nonnegative number, got {}",
                self.intensity_noise_sd
            )));
        }
        let extent = self.dims.as_array();
        for (index, l) in self.lesions.iter().enumerate() {
            let fits = l.radius >= 0.0
                && l.center.iter().zip(extent).all(|(&c, n)| {
                    c as f64 - l.radius >= 0.0 && c as f64 + l.radius <= (n - 1) as f64
                });
            if !fits {
                return Err(Error::LesionOutOfBounds {
                    index,
                    center: l.center,
                    radius: l.radius,
                    dims: self.dims,
                });
            }
        }
        Ok(())
    }
}

/// Scatters spheres until roughly `prevalence` of the grid is covered.
/// Radii are drawn uniformly from `radius_range`; spheres may overlap.
pub fn scatter_lesions(
    dims: Dim3,
    prevalence: f64,
    radius_range: (f64, f64),
    seed: u64,
) -> Result<Vec<Lesion>> {
    let (lo, hi) = radius_range;
    if !(0.0..1.0).contains(&prevalence) || !(lo >= 0.0 && hi >= lo) {
        return Err(Error::InvalidConfig(
            "bad prevalence or radius range".into(),
        ));
    }
    let extent = dims.as_array();
    if extent.iter().any(|&n| (n as f64) < 2.0 * hi + 1.0) {
        return Err(Error::InvalidConfig(format!(
            "radius {hi} does not fit in {dims}"
        )));
    }
    let mut rng = CounterRng::new(seed, LAYOUT_STREAM);
    let mut covered = vec![false; dims.len()];
    let mut count = 0usize;
    let target = (prevalence * dims.len() as f64).round() as usize;
    let mut lesions = Vec::new();
    while count < target {
        let radius = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let margin = radius.ceil() as usize;
        let mut center = [0usize; 3];
        for (c, n) in center.iter_mut().zip(extent) {
            *c = rng.random_range(margin..n - margin);
        }
        let lesion = Lesion { center, radius };
        for t in sphere_voxels(dims, &lesion) {
            if !covered[t] {
                covered[t] = true;
                count += 1;
            }
        }
        lesions.push(lesion);
    }
    Ok(lesions)
}

fn sphere_voxels(dims: Dim3, lesion: &Lesion) -> impl Iterator<Item = usize> + '_ {
    let r = lesion.radius;
    let reach = r.floor() as isize;
    let [cx, cy, cz] = lesion.center.map(|c| c as isize);
    let r2 = r * r;
    (-reach..=reach)
        .flat_map(move |dz| {
            (-reach..=reach).flat_map(move |dy| (-reach..=reach).map(move |dx| (dx, dy, dz)))
        })
        .filter(move |&(dx, dy, dz)| ((dx * dx + dy * dy + dz * dz) as f64) <= r2)
        .filter_map(move |(dx, dy, dz)| {
            let (x, y, z) = (cx + dx, cy + dy, cz + dz);
            dims.contains(x, y, z)
                .then(|| x as usize + dims.nx * (y as usize + dims.ny * z as usize))
        })
}

/// Binary truth (union of spheres) and a noisy intensity volume that is
/// brighter on the lesions.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(VolumeGrid, VolumeGrid)> {
    spec.validate()?;
    let dims = spec.dims;
    let mut truth = vec![0.0; dims.len()];
    for l in &spec.lesions {
        for t in sphere_voxels(dims, l) {
            truth[t] = 1.0;
        }
    }
    let noise = Normal::new(0.0, spec.intensity_noise_sd)
        .map_err(|e| Error::InvalidConfig(format!("noise: {e}")))?;
    let flair: Vec<f64> = truth
        .par_iter()
        .enumerate()
        .map(|(t, &y)| {
            let base = if y == 1.0 {
                spec.lesion_intensity
            } else {
                spec.background_intensity
            };
            if spec.intensity_noise_sd == 0.0 {
                base
            } else {
                let mut rng = CounterRng::for_voxel(spec.seed, PHANTOM_STREAM, t as u64);
                base + noise.sample(&mut rng)
            }
        })
        .collect();
    Ok((
        VolumeGrid::new(dims, VolumeKind::BinaryLabel, truth)?,
        VolumeGrid::new(dims, VolumeKind::Intensity, flair)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rater {
    #[serde(default)]
    pub id: Option<String>,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaterSpec {
    pub raters: Vec<Rater>,
    /// When set, only voxels on the truth boundary are flipped, each with
    /// this probability; every other vote equals the truth.
    #[serde(default)]
    pub boundary_softening: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl RaterSpec {
    pub fn from_params(params: &RaterParams, seed: u64) -> Self {
        let raters = params
            .sensitivity
            .iter()
            .zip(&params.specificity)
            .map(|(&sensitivity, &specificity)| Rater {
                id: None,
                sensitivity,
                specificity,
            })
            .collect();
        RaterSpec {
            raters,
            boundary_softening: None,
            seed,
        }
    }

    pub fn params(&self) -> Result<RaterParams> {
        RaterParams::new(
            self.raters.iter().map(|r| r.sensitivity).collect(),
            self.raters.iter().map(|r| r.specificity).collect(),
        )
    }

    pub fn ids(&self) -> Vec<String> {
        self.raters
            .iter()
            .enumerate()
            .map(|(i, r)| r.id.clone().unwrap_or_else(|| format!("e{}", i + 1)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.raters.is_empty() {
            return Err(Error::EmptyStack);
        }
        for (i, r) in self.raters.iter().enumerate() {
            for (name, v) in [
                ("sensitivity", r.sensitivity),
                ("specificity", r.specificity),
            ] {
                if !(v > 0.5 && v < 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "rater {i} {name} must lie in (0.5, 1), got {v}"
                    )));
                }
            }
        }
        if let Some(p) = self.boundary_softening {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!(
                    "boundary_softening must be a probability, got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Draws `m` rater parameter pairs uniformly from `[lo, hi]`.
pub fn random_params(m: usize, lo: f64, hi: f64, seed: u64) -> Result<RaterParams> {
    let mut rng = CounterRng::new(seed, RATER_STREAM - 1);
    let mut draw = || rng.random_range(lo..=hi);
    let sens: Vec<f64> = (0..m).map(|_| draw()).collect();
    let spec: Vec<f64> = (0..m).map(|_| draw()).collect();
    RaterParams::new(sens, spec)
}

/// Voxels whose 6-neighbourhood holds a different truth label.
pub fn boundary_shell(truth: &VolumeGrid) -> Result<Vec<bool>> {
    truth.ensure_kind(&[VolumeKind::BinaryLabel], "binary truth")?;
    let dims = truth.dims();
    let data = truth.data();
    const FACES: [[isize; 3]; 6] = [
        [1, 0, 0],
        [-1, 0, 0],
        [0, 1, 0],
        [0, -1, 0],
        [0, 0, 1],
        [0, 0, -1],
    ];
    Ok((0..data.len())
        .map(|t| {
            let (x, y, z) = dims.coords(t);
            FACES.iter().any(|[dx, dy, dz]| {
                let (a, b, c) = (x as isize + dx, y as isize + dy, z as isize + dz);
                dims.contains(a, b, c)
                    && data[a as usize + dims.nx * (b as usize + dims.ny * c as usize)] != data[t]
            })
        })
        .collect())
}

#[inline]
fn unit(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// One binary expert per rater; votes are independent given the truth.
pub fn simulate_raters(truth: &VolumeGrid, spec: &RaterSpec) -> Result<ExpertStack> {
    spec.validate()?;
    truth.ensure_kind(&[VolumeKind::BinaryLabel], "binary truth")?;
    let shell = match spec.boundary_softening {
        Some(_) => Some(boundary_shell(truth)?),
        None => None,
    };
    let y = truth.data();
    let experts = spec
        .raters
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let rng = CounterRng::new(spec.seed, RATER_STREAM + i as u64);
            let votes: Vec<f64> = (0..y.len())
                .into_par_iter()
                .map(|t| {
                    let u = unit(rng.at(t as u64));
                    let lesion = y[t] == 1.0;
                    let vote = match (&shell, spec.boundary_softening) {
                        (Some(shell), Some(p)) => lesion ^ (shell[t] && u < p),
                        _ if lesion => u < r.sensitivity,
                        _ => u >= r.specificity,
                    };
                    if vote {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            VolumeGrid::new(truth.dims(), VolumeKind::BinaryLabel, votes)
        })
        .collect::<Result<Vec<_>>>()?;
    ExpertStack::new(experts, spec.ids())
}

/// `q = (1 - blur) y + blur (1 - y)` for every vote.
pub fn soften_votes(stack: &ExpertStack, blur: f64) -> Result<ExpertStack> {
    if !(0.0..0.5).contains(&blur) {
        return Err(Error::InvalidConfig(format!(
            "blur must lie in [0, 0.5), got {blur}"
        )));
    }
    stack.ensure_kind(VolumeKind::BinaryLabel)?;
    let experts = stack
        .experts()
        .iter()
        .map(|g| {
            let data = g
                .data()
                .iter()
                .map(|&y| (1.0 - blur) * y + blur * (1.0 - y))
                .collect();
            VolumeGrid::new(g.dims(), VolumeKind::SoftLabel, data)
        })
        .collect::<Result<Vec<_>>>()?;
    ExpertStack::new(experts, stack.ids().to_vec())
}

/// Expected soft rates after blurring: `E[q | x = 1]` and `1 - E[q | x = 0]`.
pub fn blurred_params(params: &RaterParams, blur: f64) -> Result<RaterParams> {
    let mix = |r: f64| (1.0 - blur) * r + blur * (1.0 - r);
    RaterParams::new(
        params.sensitivity.iter().map(|&s| mix(s)).collect(),
        params.specificity.iter().map(|&s| mix(s)).collect(),
    )
}
