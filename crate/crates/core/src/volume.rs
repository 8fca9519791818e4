//! Dense 3D voxel grids and aligned stacks of expert annotations.
//!
//! Every grid stores 64-bit floats in x-fastest order, `t = ix + nx * (iy + ny * iz)`.
//! What the values may be is governed by the grid's [`VolumeKind`]; binary
//! labels are floats restricted to exactly `0.0` and `1.0`.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent. Serializes as `[nx, ny, nz]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 3]", into = "[usize; 3]")]
pub struct Dim3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dim3 {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidDims(format!(
                "{nx}x{ny}x{nz} has an empty axis"
            )));
        }
        nx.checked_mul(ny)
            .and_then(|p| p.checked_mul(nz))
            .ok_or_else(|| Error::InvalidDims(format!("{nx}x{ny}x{nz} overflows usize")))?;
        Ok(Dim3 { nx, ny, nz })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Dim3::new(n, n, n)
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> Result<usize> {
        linear_index(ix, iy, iz, *self)
    }

    /// Inverse of [`linear_index`].
    pub fn coords(&self, t: usize) -> (usize, usize, usize) {
        let ix = t % self.nx;
        let rest = t / self.nx;
        (ix, rest % self.ny, rest / self.ny)
    }

    pub fn contains(&self, x: isize, y: isize, z: isize) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.nx
            && (y as usize) < self.ny
            && (z as usize) < self.nz
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

impl TryFrom<[usize; 3]> for Dim3 {
    type Error = Error;

    fn try_from([nx, ny, nz]: [usize; 3]) -> Result<Self> {
        Dim3::new(nx, ny, nz)
    }
}

impl From<Dim3> for [usize; 3] {
    fn from(d: Dim3) -> Self {
        d.as_array()
    }
}

impl fmt::Display for Dim3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Flat voxel index of `(ix, iy, iz)`, x varying fastest.
pub fn linear_index(ix: usize, iy: usize, iz: usize, dims: Dim3) -> Result<usize> {
    if ix >= dims.nx || iy >= dims.ny || iz >= dims.nz {
        return Err(Error::IndexOutOfRange { ix, iy, iz, dims });
    }
    Ok(ix + dims.nx * (iy + dims.ny * iz))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Intensity,
    #[serde(rename = "binary")]
    BinaryLabel,
    #[serde(rename = "soft")]
    SoftLabel,
    Posterior,
}

impl VolumeKind {
    /// Name used in SVOL headers.
    pub fn as_str(&self) -> &'static str {
        match self {
            VolumeKind::Intensity => "intensity",
            VolumeKind::BinaryLabel => "binary",
            VolumeKind::SoftLabel => "soft",
            VolumeKind::Posterior => "posterior",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "intensity" => Some(VolumeKind::Intensity),
            "binary" => Some(VolumeKind::BinaryLabel),
            "soft" => Some(VolumeKind::SoftLabel),
            "posterior" => Some(VolumeKind::Posterior),
            _ => None,
        }
    }

    /// Whether `v` is an admissible value for this kind.
    pub fn admits(&self, v: f64) -> bool {
        match self {
            VolumeKind::Intensity => v.is_finite(),
            VolumeKind::BinaryLabel => v == 0.0 || v == 1.0,
            VolumeKind::SoftLabel | VolumeKind::Posterior => (0.0..=1.0).contains(&v),
        }
    }
}

impl fmt::Display for VolumeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A dense scalar grid whose values satisfy the constraints of its kind.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    dims: Dim3,
    kind: VolumeKind,
    data: Vec<f64>,
}

impl VolumeGrid {
    pub fn new(dims: Dim3, kind: VolumeKind, data: Vec<f64>) -> Result<Self> {
        let grid = VolumeGrid { dims, kind, data };
        grid.validate()?;
        Ok(grid)
    }

    /// Builds a grid without checking it. [`VolumeGrid::validate`] reports
    /// any violation, and [`crate::svol::write_svol`] refuses invalid grids.
    pub fn new_unvalidated(dims: Dim3, kind: VolumeKind, data: Vec<f64>) -> Self {
        VolumeGrid { dims, kind, data }
    }

    pub fn filled(dims: Dim3, kind: VolumeKind, value: f64) -> Result<Self> {
        VolumeGrid::new(dims, kind, vec![value; dims.len()])
    }

    pub fn zeros(dims: Dim3, kind: VolumeKind) -> Self {
        VolumeGrid {
            dims,
            kind,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.dims.len();
        if self.data.len() != expected {
            return Err(Error::LengthMismatch {
                dims: self.dims,
                expected,
                actual: self.data.len(),
            });
        }
        if let Some((index, &value)) = self
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| !self.kind.admits(**v))
        {
            return Err(Error::RangeViolation {
                kind: self.kind,
                index,
                value,
            });
        }
        Ok(())
    }

    pub fn dims(&self) -> Dim3 {
        self.dims
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> Result<f64> {
        Ok(self.data[self.dims.index(ix, iy, iz)?])
    }

    /// Same values reinterpreted under another kind; fails if they do not fit.
    pub fn with_kind(self, kind: VolumeKind) -> Result<Self> {
        VolumeGrid::new(self.dims, kind, self.data)
    }

    /// Number of voxels with a strictly positive value.
    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn ensure_same_dims(&self, other: &VolumeGrid) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch {
                expected: self.dims,
                actual: other.dims,
            });
        }
        Ok(())
    }

    pub fn ensure_kind(&self, kinds: &[VolumeKind], expected: &'static str) -> Result<()> {
        if kinds.contains(&self.kind) {
            Ok(())
        } else {
            Err(Error::WrongKind {
                expected,
                actual: self.kind,
            })
        }
    }
}

/// The `m` aligned annotation volumes of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertStack {
    experts: Vec<VolumeGrid>,
    ids: Vec<String>,
}

impl ExpertStack {
    pub fn new(experts: Vec<VolumeGrid>, ids: Vec<String>) -> Result<Self> {
        validate_stack(&experts, &ids)?;
        Ok(ExpertStack { experts, ids })
    }

    /// Stack with ids `e1`, `e2`, ...
    pub fn with_default_ids(experts: Vec<VolumeGrid>) -> Result<Self> {
        let ids = (1..=experts.len()).map(|i| format!("e{i}")).collect();
        ExpertStack::new(experts, ids)
    }

    pub fn validate(&self) -> Result<()> {
        validate_stack(&self.experts, &self.ids)
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn dims(&self) -> Dim3 {
        self.experts[0].dims()
    }

    pub fn voxel_count(&self) -> usize {
        self.dims().len()
    }

    pub fn kind(&self) -> VolumeKind {
        self.experts[0].kind()
    }

    pub fn experts(&self) -> &[VolumeGrid] {
        &self.experts
    }

    pub fn expert(&self, i: usize) -> &VolumeGrid {
        &self.experts[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn into_parts(self) -> (Vec<VolumeGrid>, Vec<String>) {
        (self.experts, self.ids)
    }

    /// Expert indices sorted by id. Per-voxel products over experts are
    /// accumulated in this order so results do not depend on input order.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.ids[a].cmp(&self.ids[b]));
        order
    }

    /// Values of every expert at voxel `t`, in stack order.
    pub fn votes_at(&self, t: usize) -> Vec<f64> {
        self.experts.iter().map(|g| g.data()[t]).collect()
    }

    /// Same stack reinterpreted as soft labels.
    pub fn into_soft(self) -> Result<Self> {
        let experts = self
            .experts
            .into_iter()
            .map(|g| g.with_kind(VolumeKind::SoftLabel))
            .collect::<Result<Vec<_>>>()?;
        ExpertStack::new(experts, self.ids)
    }

    pub fn ensure_kind(&self, kind: VolumeKind) -> Result<()> {
        if self.kind() != kind {
            let expected = match kind {
                VolumeKind::BinaryLabel => "binary expert",
                VolumeKind::SoftLabel => "soft expert",
                VolumeKind::Intensity => "intensity",
                VolumeKind::Posterior => "posterior",
            };
            return Err(Error::WrongKind {
                expected,
                actual: self.kind(),
            });
        }
        Ok(())
    }
}

/// Checks that the grids and ids form a valid [`ExpertStack`].
pub fn validate_stack(experts: &[VolumeGrid], ids: &[String]) -> Result<()> {
    let first = experts.first().ok_or(Error::EmptyStack)?;
    if ids.len() != experts.len() {
        return Err(Error::IdCountMismatch(ids.len(), experts.len()));
    }
    if !matches!(
        first.kind(),
        VolumeKind::BinaryLabel | VolumeKind::SoftLabel
    ) {
        return Err(Error::UnsupportedExpertKind(first.kind()));
    }
    for grid in experts {
        first.ensure_same_dims(grid)?;
        if grid.kind() != first.kind() {
            return Err(Error::MixedKinds {
                first: first.kind(),
                other: grid.kind(),
            });
        }
        grid.validate()?;
    }
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateExpertId(id.clone()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary(dims: Dim3, v: f64) -> VolumeGrid {
        VolumeGrid::filled(dims, VolumeKind::BinaryLabel, v).unwrap()
    }

    #[test]
    fn linear_index_examples() {
        let d4 = Dim3::cube(4).unwrap();
        assert_eq!(linear_index(0, 0, 0, d4).unwrap(), 0);
        assert_eq!(linear_index(3, 0, 0, d4).unwrap(), 3);
        let d456 = Dim3::new(4, 5, 6).unwrap();
        assert_eq!(linear_index(1, 2, 3, d456).unwrap(), 1 + 4 * (2 + 5 * 3));
        assert_eq!(linear_index(1, 2, 3, d456).unwrap(), 69);
    }

    #[test]
    fn linear_index_rejects_out_of_range() {
        let d = Dim3::new(4, 5, 6).unwrap();
        assert!(matches!(
            linear_index(4, 0, 0, d),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            linear_index(0, 5, 0, d),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            linear_index(0, 0, 6, d),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn linear_index_is_a_bijection() {
        let d = Dim3::new(3, 4, 5).unwrap();
        let mut seen = vec![false; d.len()];
        for iz in 0..d.nz {
            for iy in 0..d.ny {
                for ix in 0..d.nx {
                    let t = linear_index(ix, iy, iz, d).unwrap();
                    assert!(!seen[t]);
                    seen[t] = true;
                    assert_eq!(d.coords(t), (ix, iy, iz));
                }
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn dims_serialize_as_array() {
        let d = Dim3::new(4, 5, 6).unwrap();
        assert_eq!(serde_json::to_string(&d).unwrap(), "[4,5,6]");
        assert_eq!(serde_json::from_str::<Dim3>("[4,5,6]").unwrap(), d);
        assert!(serde_json::from_str::<Dim3>("[4,0,6]").is_err());
    }

    #[test]
    fn dims_reject_empty_axis() {
        assert!(Dim3::new(0, 1, 1).is_err());
        assert!(Dim3::new(usize::MAX, 2, 1).is_err());
    }

    #[test]
    fn kind_invariants() {
        let d = Dim3::new(2, 1, 1).unwrap();
        assert!(VolumeGrid::new(d, VolumeKind::BinaryLabel, vec![0.0, 0.5]).is_err());
        assert!(VolumeGrid::new(d, VolumeKind::SoftLabel, vec![0.0, 1.5]).is_err());
        assert!(VolumeGrid::new(d, VolumeKind::Posterior, vec![-0.1, 0.5]).is_err());
        assert!(VolumeGrid::new(d, VolumeKind::Intensity, vec![f64::NAN, 0.5]).is_err());
        assert!(VolumeGrid::new(d, VolumeKind::Intensity, vec![f64::INFINITY, 0.5]).is_err());
        assert!(VolumeGrid::new(d, VolumeKind::Intensity, vec![-3.0, 1e9]).is_ok());
        assert!(matches!(
            VolumeGrid::new(d, VolumeKind::SoftLabel, vec![0.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn stack_validation() {
        let d = Dim3::cube(4).unwrap();
        let ok =
            ExpertStack::with_default_ids(vec![binary(d, 0.0), binary(d, 1.0), binary(d, 0.0)]);
        assert!(ok.is_ok());

        let other = Dim3::new(4, 4, 5).unwrap();
        let err = ExpertStack::with_default_ids(vec![binary(d, 0.0), binary(other, 0.0)]);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));

        let err = ExpertStack::new(
            vec![binary(d, 0.0), binary(d, 1.0)],
            vec!["e1".into(), "e1".into()],
        );
        assert!(matches!(err, Err(Error::DuplicateExpertId(id)) if id == "e1"));

        let soft = VolumeGrid::filled(d, VolumeKind::SoftLabel, 0.3).unwrap();
        let err = ExpertStack::with_default_ids(vec![binary(d, 0.0), soft]);
        assert!(matches!(err, Err(Error::MixedKinds { .. })));

        assert!(matches!(
            ExpertStack::with_default_ids(vec![]),
            Err(Error::EmptyStack)
        ));

        let flair = VolumeGrid::filled(d, VolumeKind::Intensity, 3.0).unwrap();
        assert!(matches!(
            ExpertStack::with_default_ids(vec![flair]),
            Err(Error::UnsupportedExpertKind(_))
        ));
    }

    #[test]
    fn canonical_order_sorts_by_id() {
        let d = Dim3::cube(2).unwrap();
        let stack = ExpertStack::new(
            vec![binary(d, 0.0), binary(d, 1.0), binary(d, 0.0)],
            vec!["c".into(), "a".into(), "b".into()],
        )
        .unwrap();
        assert_eq!(stack.canonical_order(), vec![1, 2, 0]);
    }
}
