//! Triangle meshes for insertable assets, plus a loader for the `v`/`f`
//! subset of Wavefront OBJ.

use crate::geometry::BoxDims;
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("OBJ line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid mesh {asset_id}: {message}")]
    Invalid { asset_id: String, message: String },
}

/// Mesh in asset-local meters: origin at the footprint center, +x forward,
/// +z up. One flat base color per triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetMesh {
    pub asset_id: String,
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub colors: Vec<[u8; 3]>,
    pub dims: BoxDims,
}

/// Outward-facing (counter-clockwise seen from outside) triangles of a box
/// whose corners follow [`crate::geometry::CORNER_SIGNS`].
const CUBOID_TRIANGLES: [[u32; 3]; 12] = [
    [0, 2, 1],
    [0, 3, 2],
    [4, 5, 6],
    [4, 6, 7],
    [0, 1, 5],
    [0, 5, 4],
    [1, 2, 6],
    [1, 6, 5],
    [2, 3, 7],
    [2, 7, 6],
    [3, 0, 4],
    [3, 4, 7],
];

fn cuboid_vertices(min: Vector3<f64>, max: Vector3<f64>) -> [Vector3<f64>; 8] {
    crate::geometry::CORNER_SIGNS.map(|s| {
        Vector3::new(
            if s[0] > 0.0 { max.x } else { min.x },
            if s[1] > 0.0 { max.y } else { min.y },
            if s[2] > 0.0 { max.z } else { min.z },
        )
    })
}

impl AssetMesh {
    pub fn new(
        asset_id: impl Into<String>,
        vertices: Vec<Vector3<f64>>,
        triangles: Vec<[u32; 3]>,
        colors: Vec<[u8; 3]>,
        dims: BoxDims,
    ) -> Result<Self, MeshError> {
        let mesh = Self { asset_id: asset_id.into(), vertices, triangles, colors, dims };
        mesh.validate()?;
        Ok(mesh)
    }

    /// A plain box filling `dims`.
    pub fn cuboid(asset_id: impl Into<String>, dims: BoxDims, color: [u8; 3]) -> Self {
        let half = Vector3::new(dims.length / 2.0, dims.width / 2.0, 0.0);
        let vertices = cuboid_vertices(-half, half + Vector3::new(0.0, 0.0, dims.height)).to_vec();
        Self {
            asset_id: asset_id.into(),
            vertices,
            triangles: CUBOID_TRIANGLES.to_vec(),
            colors: vec![color; 12],
            dims,
        }
    }

    /// Two stacked boxes: a full-footprint body and a shorter, narrower cabin.
    pub fn vehicle(asset_id: impl Into<String>, dims: BoxDims, body: [u8; 3], cabin: [u8; 3]) -> Self {
        let (l, w, h) = (dims.length, dims.width, dims.height);
        let body_h = 0.55 * h;
        let mut vertices = cuboid_vertices(Vector3::new(-l / 2.0, -w / 2.0, 0.0), Vector3::new(l / 2.0, w / 2.0, body_h)).to_vec();
        vertices.extend(cuboid_vertices(
            Vector3::new(-0.35 * l, -0.45 * w, body_h),
            Vector3::new(0.2 * l, 0.45 * w, h),
        ));
        let mut triangles = CUBOID_TRIANGLES.to_vec();
        triangles.extend(CUBOID_TRIANGLES.iter().map(|t| t.map(|i| i + 8)));
        let mut colors = vec![body; 12];
        colors.extend(std::iter::repeat_n(cabin, 12));
        Self { asset_id: asset_id.into(), vertices, triangles, colors, dims }
    }

    /// Parses the `v` and `f` lines of an OBJ file. Polygonal faces are fan
    /// triangulated; texture/normal indices are ignored.
    pub fn from_obj(asset_id: impl Into<String>, text: &str, dims: BoxDims, color: [u8; 3]) -> Result<Self, MeshError> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let mut parts = raw.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let coords: Vec<f64> = parts
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| MeshError::Parse { line, message: e.to_string() })?;
                    if coords.len() != 3 {
                        return Err(MeshError::Parse { line, message: "vertex needs 3 coordinates".into() });
                    }
                    vertices.push(Vector3::new(coords[0], coords[1], coords[2]));
                }
                Some("f") => {
                    let idx: Vec<u32> = parts
                        .map(|t| parse_face_index(t, vertices.len()).ok_or_else(|| MeshError::Parse {
                            line,
                            message: format!("bad face index {t:?}"),
                        }))
                        .collect::<Result<_, _>>()?;
                    if idx.len() < 3 {
                        return Err(MeshError::Parse { line, message: "face needs at least 3 vertices".into() });
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        let colors = vec![color; triangles.len()];
        Self::new(asset_id, vertices, triangles, colors, dims)
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        self.vertices.iter().fold(
            (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), v| (lo.inf(v), hi.sup(v)),
        )
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        let invalid = |message: String| MeshError::Invalid { asset_id: self.asset_id.clone(), message };
        if self.triangles.len() < 12 {
            return Err(invalid(format!("{} triangles, need at least 12", self.triangles.len())));
        }
        if self.colors.len() != self.triangles.len() {
            return Err(invalid("one color per triangle required".into()));
        }
        let n = self.vertices.len() as u32;
        if self.triangles.iter().flatten().any(|&i| i >= n) {
            return Err(invalid("triangle index out of range".into()));
        }
        if !self.dims.is_valid() {
            return Err(invalid(format!("nominal dims must be positive: {:?}", self.dims)));
        }
        let (lo, hi) = self.bounds();
        let ext = hi - lo;
        let nominal = [self.dims.length, self.dims.width, self.dims.height];
        for (axis, (&e, &d)) in ext.iter().zip(nominal.iter()).enumerate() {
            if ((e - d) / d).abs() > 0.05 {
                return Err(invalid(format!("extent {e:.3} along axis {axis} differs from nominal {d:.3} by more than 5%")));
            }
        }
        Ok(())
    }
}

fn parse_face_index(token: &str, count: usize) -> Option<u32> {
    let first = token.split('/').next()?;
    let i: i64 = first.parse().ok()?;
    let resolved = if i < 0 { count as i64 + i } else { i - 1 };
    (resolved >= 0 && (resolved as usize) < count).then_some(resolved as u32)
}
