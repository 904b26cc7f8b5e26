//! Feature grids and the VIBE1 on-disk container.
//!
//! A VIBE1 file is laid out as
//!
//! ```text
//! magic        6 bytes   "VIBE1\0"
//! header_len   u32 LE    length of the JSON header in bytes
//! header       JSON      {version, image_id, height, width, dim, space, dtype, order, endian}
//! payload      f32 LE    height * width * dim values, row-major (token-major)
//! ```
//!
//! Tokens are held in memory as `f64`. Writing rounds each value to the nearest
//! `f32`, so a grid read back from disk always round-trips bit-exactly.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VibeError};

pub const MAGIC: &[u8; 6] = b"VIBE1\0";
pub const FORMAT_VERSION: u32 = 1;

/// Which feature space a grid lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSpace {
    /// Encoder input space.
    Source,
    /// Decoder output space.
    Target,
    /// Untagged data (synthetic clouds); usable as either.
    Raw,
}

impl fmt::Display for FeatureSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureSpace::Source => "source",
            FeatureSpace::Target => "target",
            FeatureSpace::Raw => "raw",
        };
        f.write_str(s)
    }
}

/// A dense `height x width` field of `dim`-dimensional tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    image_id: String,
    height: usize,
    width: usize,
    space: FeatureSpace,
    tokens: DMatrix<f64>,
}

impl FeatureGrid {
    /// Builds a grid from a `(height * width) x dim` token matrix.
    pub fn new(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        space: FeatureSpace,
        tokens: DMatrix<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(VibeError::invalid("height/width", "grid must hold at least one token"));
        }
        if tokens.ncols() == 0 {
            return Err(VibeError::invalid("dim", "token dimension must be positive"));
        }
        if tokens.nrows() != height * width {
            return Err(VibeError::DimensionMismatch {
                context: "feature grid token rows",
                expected: height * width,
                actual: tokens.nrows(),
            });
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(VibeError::NonFinite("feature grid tokens"));
        }
        Ok(Self {
            image_id: image_id.into(),
            height,
            width,
            space,
            tokens,
        })
    }

    /// Wraps an `n x dim` matrix as an `n x 1` grid.
    pub fn from_rows(
        image_id: impl Into<String>,
        space: FeatureSpace,
        tokens: DMatrix<f64>,
    ) -> Result<Self> {
        let n = tokens.nrows();
        Self::new(image_id, n, 1, space, tokens)
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn space(&self) -> FeatureSpace {
        self.space
    }

    pub fn tokens(&self) -> &DMatrix<f64> {
        &self.tokens
    }

    pub fn into_tokens(self) -> DMatrix<f64> {
        self.tokens
    }

    pub fn with_space(mut self, space: FeatureSpace) -> Self {
        self.space = space;
        self
    }

    pub fn with_image_id(mut self, image_id: impl Into<String>) -> Self {
        self.image_id = image_id.into();
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeatureHeader {
    version: u32,
    image_id: String,
    height: usize,
    width: usize,
    dim: usize,
    space: FeatureSpace,
    dtype: String,
    order: String,
    endian: String,
}

/// Serializes a grid into VIBE1 bytes.
pub fn encode_feature_grid(grid: &FeatureGrid) -> Result<Vec<u8>> {
    if grid.tokens.iter().any(|v| !v.is_finite()) {
        return Err(VibeError::NonFinite("feature grid tokens"));
    }
    let header = FeatureHeader {
        version: FORMAT_VERSION,
        image_id: grid.image_id.clone(),
        height: grid.height,
        width: grid.width,
        dim: grid.dim(),
        space: grid.space,
        dtype: "f32".into(),
        order: "row-major".into(),
        endian: "little".into(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let header_len = u32::try_from(json.len())
        .map_err(|_| VibeError::invalid("image_id", "header exceeds u32 length"))?;

    let n = grid.len();
    let d = grid.dim();
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + n * d * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for i in 0..n {
        for j in 0..d {
            let v = grid.tokens[(i, j)] as f32;
            if !v.is_finite() {
                return Err(VibeError::NonFinite("feature grid tokens (f32 overflow)"));
            }
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses VIBE1 bytes. `origin` is only used in error messages.
pub fn decode_feature_grid(bytes: &[u8], origin: &Path) -> Result<FeatureGrid> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(VibeError::BadMagic(origin.to_path_buf()));
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(VibeError::BadHeader {
            path: origin.to_path_buf(),
            reason: "missing header length".into(),
        });
    }
    let header_len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let rest = &rest[4..];
    if rest.len() < header_len {
        return Err(VibeError::BadHeader {
            path: origin.to_path_buf(),
            reason: format!("header length {header_len} exceeds file size"),
        });
    }
    let header: FeatureHeader =
        serde_json::from_slice(&rest[..header_len]).map_err(|e| VibeError::BadHeader {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
    let bad = |reason: String| VibeError::BadHeader {
        path: origin.to_path_buf(),
        reason,
    };
    if header.dtype != "f32" {
        return Err(bad(format!("unknown dtype {:?}", header.dtype)));
    }
    if header.order != "row-major" {
        return Err(bad(format!("unsupported order {:?}", header.order)));
    }
    if header.endian != "little" {
        return Err(bad(format!("unsupported endian {:?}", header.endian)));
    }
    if header.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }

    let payload = &rest[header_len..];
    let n = header.height * header.width;
    let expected = n * header.dim * 4;
    if payload.len() != expected {
        return Err(VibeError::PayloadLength {
            path: origin.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let tokens = DMatrix::from_row_slice(n, header.dim, &values);
    FeatureGrid::new(header.image_id, header.height, header.width, header.space, tokens)
}

pub fn write_feature_file(grid: &FeatureGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_feature_grid(grid)?;
    fs::write(path, bytes).map_err(|e| VibeError::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| VibeError::io(path, e))?;
    decode_feature_grid(&bytes, path)
}

/// Synthetic manifolds for desk-scale checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudKind {
    Circle,
    SwissRoll,
    TwoArcs,
}

impl std::str::FromStr for CloudKind {
    type Err = VibeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(CloudKind::Circle),
            "swiss_roll" | "swiss-roll" => Ok(CloudKind::SwissRoll),
            "two_arcs" | "two-arcs" => Ok(CloudKind::TwoArcs),
            other => Err(VibeError::invalid(
                "kind",
                format!("unknown cloud kind {other:?} (expected circle, swiss_roll, two_arcs)"),
            )),
        }
    }
}

/// Angular range of the swiss-roll spiral: theta in [1.5 pi, 4.5 pi], radius = theta.
pub const SWISS_ROLL_THETA: (f64, f64) = (1.5 * PI, 4.5 * PI);
/// Extent of the swiss roll along its axis. Kept narrow so the roll behaves as a ribbon.
pub const SWISS_ROLL_HEIGHT: f64 = 1.0;

/// Samples `n` points from a synthetic manifold.
///
/// * circle: unit circle, evenly spaced angles with a seeded phase.
/// * swiss_roll: `(theta cos theta, h, theta sin theta)` with theta uniform on
///   [`SWISS_ROLL_THETA`] and `h` uniform on `[0, SWISS_ROLL_HEIGHT]`.
/// * two_arcs: two interleaved half circles, evenly spaced.
///
/// Each point is displaced by a random offset of norm at most `noise`.
pub fn synth_point_cloud(kind: CloudKind, n: usize, noise: f64, seed: u64) -> Result<FeatureGrid> {
    if n < 4 {
        return Err(VibeError::invalid("n", format!("need at least 4 points, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(VibeError::invalid("noise", "must be a finite non-negative number"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dim, mut rows): (usize, Vec<Vec<f64>>) = match kind {
        CloudKind::Circle => {
            let phase = rng.random::<f64>() * 2.0 * PI;
            let rows = (0..n)
                .map(|i| {
                    let a = phase + 2.0 * PI * i as f64 / n as f64;
                    vec![a.cos(), a.sin()]
                })
                .collect();
            (2, rows)
        }
        CloudKind::SwissRoll => {
            let (lo, hi) = SWISS_ROLL_THETA;
            let rows = (0..n)
                .map(|_| {
                    let theta = lo + (hi - lo) * rng.random::<f64>();
                    let h = SWISS_ROLL_HEIGHT * rng.random::<f64>();
                    vec![theta * theta.cos(), h, theta * theta.sin()]
                })
                .collect();
            (3, rows)
        }
        CloudKind::TwoArcs => {
            let upper = n.div_ceil(2);
            let lower = n - upper;
            let mut rows = Vec::with_capacity(n);
            for i in 0..upper {
                let t = PI * i as f64 / (upper - 1).max(1) as f64;
                rows.push(vec![t.cos(), t.sin()]);
            }
            for i in 0..lower {
                let t = PI * i as f64 / (lower - 1).max(1) as f64;
                rows.push(vec![1.0 - t.cos(), 0.5 - t.sin()]);
            }
            (2, rows)
        }
    };
    if noise > 0.0 {
        for row in rows.iter_mut() {
            let dir: Vec<f64> = (0..dim).map(|_| <ChaCha8Rng as rand::Rng>::sample::<f64, _>(&mut rng, StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let radius = noise * rng.random::<f64>();
            for (x, d) in row.iter_mut().zip(dir) {
                *x += radius * d / norm;
            }
        }
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let tokens = DMatrix::from_row_slice(n, dim, &flat);
    let id = match kind {
        CloudKind::Circle => "circle",
        CloudKind::SwissRoll => "swiss_roll",
        CloudKind::TwoArcs => "two_arcs",
    };
    FeatureGrid::new(id, n, 1, FeatureSpace::Raw, tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp_path(dir: &tempfile::TempDir, name: &str) -> std::path::PathBuf {
        dir.path().join(name)
    }

    #[test]
    fn smallest_grid_has_four_zero_payload_bytes() {
        let grid =
            FeatureGrid::new("z", 1, 1, FeatureSpace::Raw, DMatrix::from_element(1, 1, 0.0)).unwrap();
        let bytes = encode_feature_grid(&grid).unwrap();
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let payload = &bytes[10 + header_len..];
        assert_eq!(payload, &[0u8; 4]);
        assert_eq!(&bytes[..6], b"VIBE1\0");
    }

    #[test]
    fn payload_length_is_four_bytes_per_value() {
        let tokens = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        let grid = FeatureGrid::new("g", 2, 2, FeatureSpace::Source, tokens).unwrap();
        let bytes = encode_feature_grid(&grid).unwrap();
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 10 - header_len, 48);
        // row-major: second value on disk is token 0, channel 1
        let second = f32::from_le_bytes(bytes[10 + header_len + 4..10 + header_len + 8].try_into().unwrap());
        assert_eq!(second, 1.0);
    }

    #[test]
    fn header_carries_fixed_layout_fields() {
        let grid = synth_point_cloud(CloudKind::Circle, 8, 0.0, 1).unwrap();
        let bytes = encode_feature_grid(&grid).unwrap();
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[10..10 + header_len]).unwrap();
        assert_eq!(v["dtype"], "f32");
        assert_eq!(v["order"], "row-major");
        assert_eq!(v["endian"], "little");
        assert_eq!(v["space"], "raw");
        assert_eq!(v["height"], 8);
        assert_eq!(v["width"], 1);
        assert_eq!(v["dim"], 2);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = tmp_path(&dir, "bad.vibe");
        fs::write(&p, b"XXXX\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_feature_file(&p), Err(VibeError::BadMagic(_))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = tmp_path(&dir, "t.vibe");
        let grid = synth_point_cloud(CloudKind::TwoArcs, 10, 0.0, 3).unwrap();
        let mut bytes = encode_feature_grid(&grid).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        match read_feature_file(&p) {
            Err(VibeError::PayloadLength { expected, actual, .. }) => {
                assert_eq!(expected, 80);
                assert_eq!(actual, 79);
            }
            other => panic!("expected payload error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_dtype() {
        let grid = synth_point_cloud(CloudKind::Circle, 4, 0.0, 0).unwrap();
        let bytes = encode_feature_grid(&grid).unwrap();
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[10..10 + header_len]).unwrap().replace("\"f32\"", "\"f16\"");
        let mut forged = Vec::new();
        forged.extend_from_slice(MAGIC);
        forged.extend_from_slice(&(header.len() as u32).to_le_bytes());
        forged.extend_from_slice(header.as_bytes());
        forged.extend_from_slice(&bytes[10 + header_len..]);
        let err = decode_feature_grid(&forged, Path::new("forged")).unwrap_err();
        assert!(err.to_string().contains("dtype"), "{err}");
    }

    #[test]
    fn rejects_non_finite_tokens() {
        let mut tokens = DMatrix::from_element(2, 2, 1.0);
        tokens[(1, 1)] = f64::NAN;
        assert!(FeatureGrid::new("n", 2, 1, FeatureSpace::Raw, tokens).is_err());
        let big = DMatrix::from_element(1, 1, 1e300);
        let grid = FeatureGrid::new("big", 1, 1, FeatureSpace::Raw, big).unwrap();
        assert!(matches!(encode_feature_grid(&grid), Err(VibeError::NonFinite(_))));
    }

    #[test]
    fn grid_invariants_enforced() {
        assert!(FeatureGrid::new("a", 2, 2, FeatureSpace::Raw, DMatrix::zeros(3, 2)).is_err());
        assert!(FeatureGrid::new("a", 0, 2, FeatureSpace::Raw, DMatrix::zeros(0, 2)).is_err());
        assert!(FeatureGrid::new("a", 1, 1, FeatureSpace::Raw, DMatrix::zeros(1, 0)).is_err());
    }

    #[test]
    fn circle_points_are_equidistant_from_centroid() {
        let grid = synth_point_cloud(CloudKind::Circle, 8, 0.0, 11).unwrap();
        let t = grid.tokens();
        let cx = t.column(0).mean();
        let cy = t.column(1).mean();
        let r0 = ((t[(0, 0)] - cx).powi(2) + (t[(0, 1)] - cy).powi(2)).sqrt();
        for i in 1..8 {
            let r = ((t[(i, 0)] - cx).powi(2) + (t[(i, 1)] - cy).powi(2)).sqrt();
            assert!((r - r0).abs() < 1e-12);
        }
    }

    #[test]
    fn swiss_roll_lies_on_its_spiral() {
        let grid = synth_point_cloud(CloudKind::SwissRoll, 500, 0.0, 5).unwrap();
        assert_eq!(grid.dim(), 3);
        assert_eq!((grid.height(), grid.width()), (500, 1));
        let (lo, hi) = SWISS_ROLL_THETA;
        for row in grid.tokens().row_iter() {
            let r = row[0].hypot(row[2]);
            assert!(r >= lo - 1e-9 && r <= hi + 1e-9);
            // the polar angle must equal the radius modulo a full turn
            let angle = row[2].atan2(row[0]);
            let turns = (r - angle) / (2.0 * PI);
            assert!((turns - turns.round()).abs() * 2.0 * PI < 1e-9, "radius {r} angle {angle}");
            assert!(row[1] >= 0.0 && row[1] <= SWISS_ROLL_HEIGHT);
        }
    }

    #[test]
    fn two_arcs_lie_on_their_half_circles() {
        let grid = synth_point_cloud(CloudKind::TwoArcs, 21, 0.0, 0).unwrap();
        for (i, row) in grid.tokens().row_iter().enumerate() {
            let r = if i < 11 {
                row[0].hypot(row[1])
            } else {
                (row[0] - 1.0).hypot(row[1] - 0.5)
            };
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_stays_within_radius() {
        let clean = synth_point_cloud(CloudKind::Circle, 64, 0.0, 9).unwrap();
        let noisy = synth_point_cloud(CloudKind::Circle, 64, 0.05, 9).unwrap();
        // same seed draws the same phase first
        for (a, b) in clean.tokens().row_iter().zip(noisy.tokens().row_iter()) {
            assert!((a - b).norm() <= 0.05 + 1e-12);
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_validated() {
        for kind in [CloudKind::Circle, CloudKind::SwissRoll, CloudKind::TwoArcs] {
            let a = synth_point_cloud(kind, 40, 0.1, 77).unwrap();
            let b = synth_point_cloud(kind, 40, 0.1, 77).unwrap();
            assert_eq!(a, b);
        }
        assert!(synth_point_cloud(CloudKind::Circle, 3, 0.0, 0).is_err());
        assert!(synth_point_cloud(CloudKind::Circle, 8, -1.0, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn file_round_trip_is_bit_exact(
            h in 1usize..5, w in 1usize..5, d in 1usize..6,
            seed in any::<u64>(),
            space in prop_oneof![Just(FeatureSpace::Source), Just(FeatureSpace::Target), Just(FeatureSpace::Raw)],
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..h * w * d)
                .map(|_| (<ChaCha8Rng as rand::Rng>::sample::<f64, _>(&mut rng, StandardNormal) * 100.0) as f32 as f64)
                .collect();
            let grid = FeatureGrid::new("p", h, w, space, DMatrix::from_row_slice(h * w, d, &values)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("g.vibe");
            write_feature_file(&grid, &p).unwrap();
            let back = read_feature_file(&p).unwrap();
            prop_assert_eq!(back.tokens().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            grid.tokens().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, grid);
        }
    }
}
