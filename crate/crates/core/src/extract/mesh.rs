//! Triangle meshes: cleanup, queries and OBJ / PLY files.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::Vec3;

/// Triangle mesh with an optional per-vertex scalar (for error coloring).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub scalar: Option<Vec<f64>>,
}

/// Output file type for [`TriMesh::save`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    /// Guess from a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(e) if e == "obj" => Ok(Self::Obj),
            Some(e) if e == "ply" => Ok(Self::Ply),
            _ => Err(Error::Format(format!(
                "cannot infer mesh format from {}",
                path.display()
            ))),
        }
    }
}

fn tri_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let m = Self {
            vertices,
            triangles,
            scalar: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= self.vertices.len())) {
            return Err(Error::Format(format!(
                "triangle {t:?} indexes past {} vertices",
                self.vertices.len()
            )));
        }
        if self.vertices.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("mesh vertex".into()));
        }
        if let Some(s) = &self.scalar {
            if s.len() != self.vertices.len() {
                return Err(Error::Shape("one scalar per vertex expected".into()));
            }
        }
        Ok(())
    }

    /// Weld bitwise-identical vertices, drop triangles with repeated
    /// corners or zero area, then drop unreferenced vertices.
    pub fn cleanup(&mut self) {
        let mut remap = Vec::with_capacity(self.vertices.len());
        let mut first: HashMap<[u64; 3], usize> = HashMap::new();
        for (i, v) in self.vertices.iter().enumerate() {
            let key = [v.x, v.y, v.z].map(|x| (x + 0.0).to_bits());
            remap.push(*first.entry(key).or_insert(i));
        }
        let verts = &self.vertices;
        self.triangles = self
            .triangles
            .iter()
            .map(|t| t.map(|i| remap[i]))
            .filter(|t| {
                t[0] != t[1]
                    && t[1] != t[2]
                    && t[0] != t[2]
                    && tri_area(&verts[t[0]], &verts[t[1]], &verts[t[2]]) > 0.0
            })
            .collect();
        let mut new_index = vec![usize::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut scalar = self.scalar.as_ref().map(|_| Vec::new());
        for t in &mut self.triangles {
            for i in t.iter_mut() {
                if new_index[*i] == usize::MAX {
                    new_index[*i] = vertices.len();
                    vertices.push(self.vertices[*i]);
                    if let (Some(out), Some(src)) = (scalar.as_mut(), self.scalar.as_ref()) {
                        out.push(src[*i]);
                    }
                }
                *i = new_index[*i];
            }
        }
        self.vertices = vertices;
        self.scalar = scalar;
    }

    /// Number of triangles using each undirected edge.
    pub fn edge_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut count = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        count
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.edge_counts().values().all(|&n| n == 2)
    }

    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| tri_area(&self.vertices[t[0]], &self.vertices[t[1]], &self.vertices[t[2]]))
            .sum()
    }

    /// Axis-aligned bounding box `(min, max)`; `None` when empty.
    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }

    /// `n` points distributed uniformly over the surface area.
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
        if self.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in &self.triangles {
            acc += tri_area(&self.vertices[t[0]], &self.vertices[t[1]], &self.vertices[t[2]]);
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::Degenerate("mesh has zero area".into()));
        }
        Ok((0..n)
            .map(|_| {
                let r = rng.random_range(0.0..acc);
                let k = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
                let [a, b, c] = self.triangles[k].map(|i| self.vertices[i]);
                let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                a + (b - a) * u + (c - a) * v
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match MeshFormat::from_path(path)? {
            MeshFormat::Obj => self.save_obj(path),
            MeshFormat::Ply => self.save_ply(path),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        match MeshFormat::from_path(path)? {
            MeshFormat::Obj => Self::load_obj(path),
            MeshFormat::Ply => Self::load_ply(path),
        }
    }

    /// ASCII OBJ with `v` and `f` records.
    pub fn save_obj(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = BufWriter::new(File::create(path)?);
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read `v` and `f` records; polygons are fan-triangulated, texture and
    /// normal indices ignored.
    pub fn load_obj(path: &Path) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            let mut it = line.split_whitespace();
            let bad = || Error::Format(format!("OBJ line {}: {line:?}", n + 1));
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|s| s.parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?;
                    if c.len() != 3 {
                        return Err(bad());
                    }
                    vertices.push(Vec3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let idx: Vec<usize> = it
                        .map(|s| {
                            let i: i64 = s.split('/').next().unwrap_or("").parse().map_err(|_| bad())?;
                            let i = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                            usize::try_from(i).map_err(|_| bad())
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(bad());
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Self::new(vertices, triangles)
    }

    /// Binary little-endian PLY: double vertex coordinates, an optional
    /// float `quality` property, and `uchar`/`int` face lists.
    pub fn save_ply(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = BufWriter::new(File::create(path)?);
        write!(
            w,
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
             property double x\nproperty double y\nproperty double z\n",
            self.vertices.len()
        )?;
        if self.scalar.is_some() {
            writeln!(w, "property float quality")?;
        }
        write!(
            w,
            "element face {}\nproperty list uchar int vertex_indices\nend_header\n",
            self.triangles.len()
        )?;
        for (i, v) in self.vertices.iter().enumerate() {
            for x in v.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
            if let Some(s) = &self.scalar {
                w.write_all(&(s[i] as f32).to_le_bytes())?;
            }
        }
        for t in &self.triangles {
            w.write_all(&[3u8])?;
            for &i in t {
                let i = i32::try_from(i).map_err(|_| Error::Format("too many vertices for PLY".into()))?;
                w.write_all(&i.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Binary little-endian PLY with scalar vertex properties of any numeric
    /// type; `x`, `y`, `z` and an optional `quality` (or `scalar`) are kept.
    pub fn load_ply(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = Vec::new();
        loop {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("PLY header not terminated".into()));
            }
            let line = line.trim().to_string();
            if line == "end_header" {
                break;
            }
            header.push(line);
        }
        if header.first().map(String::as_str) != Some("ply")
            || !header.iter().any(|l| l == "format binary_little_endian 1.0")
        {
            return Err(Error::Format("only binary little-endian PLY is supported".into()));
        }
        let mut n_vert = 0;
        let mut n_face = 0;
        let mut props: Vec<(String, String)> = Vec::new();
        let mut face_types = ("uchar".to_string(), "int".to_string());
        let mut current = "";
        for l in &header {
            let t: Vec<&str> = l.split_whitespace().collect();
            match t.as_slice() {
                ["element", "vertex", n] => {
                    n_vert = n.parse().map_err(|_| Error::Format("bad vertex count".into()))?;
                    current = "vertex";
                }
                ["element", "face", n] => {
                    n_face = n.parse().map_err(|_| Error::Format("bad face count".into()))?;
                    current = "face";
                }
                ["element", ..] => current = "other",
                ["property", "list", c, i, _] if current == "face" => {
                    face_types = (c.to_string(), i.to_string());
                }
                ["property", ty, name] if current == "vertex" => {
                    props.push((ty.to_string(), name.to_string()));
                }
                _ => {}
            }
        }
        let read_num = |r: &mut dyn Read, ty: &str| -> Result<f64> {
            let mut b = [0u8; 8];
            let n = match ty {
                "char" | "int8" | "uchar" | "uint8" => 1,
                "short" | "int16" | "ushort" | "uint16" => 2,
                "int" | "int32" | "uint" | "uint32" | "float" | "float32" => 4,
                "double" | "float64" => 8,
                other => return Err(Error::Format(format!("unknown PLY type {other}"))),
            };
            r.read_exact(&mut b[..n])?;
            Ok(match ty {
                "char" | "int8" => b[0] as i8 as f64,
                "uchar" | "uint8" => b[0] as f64,
                "short" | "int16" => i16::from_le_bytes([b[0], b[1]]) as f64,
                "ushort" | "uint16" => u16::from_le_bytes([b[0], b[1]]) as f64,
                "int" | "int32" => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
                "uint" | "uint32" => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
                "float" | "float32" => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
                _ => f64::from_le_bytes(b),
            })
        };
        let pos = |name: &str| props.iter().position(|(_, n)| n == name);
        let (ix, iy, iz) = match (pos("x"), pos("y"), pos("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err(Error::Format("PLY vertices need x, y and z".into())),
        };
        let iq = pos("quality").or_else(|| pos("scalar"));
        let mut vertices = Vec::with_capacity(n_vert);
        let mut scalar = iq.map(|_| Vec::with_capacity(n_vert));
        let mut vals = vec![0.0; props.len()];
        for _ in 0..n_vert {
            for (k, (ty, _)) in props.iter().enumerate() {
                vals[k] = read_num(&mut r, ty)?;
            }
            vertices.push(Vec3::new(vals[ix], vals[iy], vals[iz]));
            if let (Some(q), Some(s)) = (iq, scalar.as_mut()) {
                s.push(vals[q]);
            }
        }
        let mut triangles = Vec::with_capacity(n_face);
        for _ in 0..n_face {
            let k = read_num(&mut r, &face_types.0)? as usize;
            let idx: Vec<usize> = (0..k)
                .map(|_| read_num(&mut r, &face_types.1).map(|v| v as usize))
                .collect::<Result<_>>()?;
            if k < 3 {
                return Err(Error::Format("PLY face with fewer than 3 vertices".into()));
            }
            for j in 1..k - 1 {
                triangles.push([idx[0], idx[j], idx[j + 1]]);
            }
        }
        let mut m = Self::new(vertices, triangles)?;
        m.scalar = scalar;
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tetra() -> TriMesh {
        TriMesh::new(
            vec![
                Vec3::zeros(),
                Vec3::x(),
                Vec3::y(),
                Vec3::z(),
            ],
            vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn triangle_roundtrips_through_obj() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.obj");
        let m = TriMesh::new(vec![Vec3::zeros(), Vec3::x(), Vec3::y()], vec![[0, 1, 2]]).unwrap();
        m.save(&p).unwrap();
        assert_eq!(TriMesh::load(&p).unwrap(), m);
        std::fs::write(&p, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n").unwrap();
        assert_eq!(TriMesh::load(&p).unwrap().triangles.len(), 2);
    }

    #[test]
    fn ply_preserves_counts_and_scalar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ply");
        let mut m = tetra();
        m.scalar = Some(vec![0.1, 0.25, 1.0 / 3.0, 7.0]);
        m.save(&p).unwrap();
        let back = TriMesh::load(&p).unwrap();
        assert_eq!(back.vertices, m.vertices);
        assert_eq!(back.triangles, m.triangles);
        for (a, b) in back.scalar.unwrap().iter().zip(m.scalar.unwrap()) {
            assert_eq!(*a, b as f32 as f64);
        }
    }

    #[test]
    fn invalid_meshes_are_rejected() {
        assert!(TriMesh::new(vec![Vec3::zeros()], vec![[0, 1, 2]]).is_err());
        assert!(TriMesh::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)], vec![]).is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(tetra().save(&dir.path().join("x.stl")).is_err());
        assert!(tetra().save(&dir.path().join("missing/x.obj")).is_err());
    }

    #[test]
    fn watertight_and_area() {
        let m = tetra();
        assert!(m.is_watertight());
        let want = 1.5 + 3f64.sqrt() / 2.0;
        assert!((m.area() - want).abs() < 1e-12);
        let mut open = m.clone();
        open.triangles.pop();
        assert!(!open.is_watertight());
    }

    #[test]
    fn cleanup_welds_and_drops_degenerate_faces() {
        let mut m = TriMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::x(), Vec3::new(9.0, 9.0, 9.0)],
            vec![[0, 1, 2], [0, 3, 1], [2, 1, 3]],
        )
        .unwrap();
        m.cleanup();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
    }

    #[test]
    fn surface_samples_lie_on_the_mesh() {
        let m = tetra();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let pts = m.sample_surface(500, &mut rng).unwrap();
        for p in pts {
            let on_face = p.x.abs() < 1e-12
                || p.y.abs() < 1e-12
                || p.z.abs() < 1e-12
                || (p.x + p.y + p.z - 1.0).abs() < 1e-12;
            assert!(on_face && p.min() >= -1e-12);
        }
        assert!(TriMesh::default().sample_surface(3, &mut rng).is_err());
    }
}
