//! Wavefront OBJ (with MTL and PNG texture) and binary PLY.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{MeshError, TriangleMesh, UvLayer};
use crate::image::Image;

/// Files written by [`write_obj`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjFiles {
    pub obj: PathBuf,
    pub mtl: Option<PathBuf>,
    pub texture: Option<PathBuf>,
}

/// Writes `path` and, when a texture is given, a sibling `.mtl` and `.png`.
/// OBJ `vt` rows store `1 - v` so that image row 0 is the top.
pub fn write_obj(mesh: &TriangleMesh, texture: Option<&Image>, path: &Path) -> Result<ObjFiles, MeshError> {
    mesh.validate()?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| MeshError::Invalid(format!("bad output path {}", path.display())))?
        .to_owned();
    let mut files = ObjFiles {
        obj: path.to_path_buf(),
        mtl: None,
        texture: None,
    };
    let mut w = BufWriter::new(File::create(path)?);
    if let (Some(tex), Some(_)) = (texture, &mesh.uv) {
        let mtl = path.with_extension("mtl");
        let png = path.with_extension("png");
        tex.write_png(&png)?;
        let mut m = BufWriter::new(File::create(&mtl)?);
        writeln!(m, "newmtl material0")?;
        writeln!(m, "Ka 1 1 1\nKd 1 1 1\nKs 0 0 0\nillum 1")?;
        writeln!(m, "map_Kd {stem}.png")?;
        m.flush()?;
        writeln!(w, "mtllib {stem}.mtl")?;
        writeln!(w, "usemtl material0")?;
        files.mtl = Some(mtl);
        files.texture = Some(png);
    }
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
    }
    match &mesh.uv {
        Some(uv) => {
            for t in &uv.coords {
                writeln!(w, "vt {} {}", t[0], 1.0 - t[1])?;
            }
            for (f, tf) in mesh.faces.iter().zip(&uv.faces) {
                writeln!(
                    w,
                    "f {}/{} {}/{} {}/{}",
                    f[0] + 1,
                    tf[0] + 1,
                    f[1] + 1,
                    tf[1] + 1,
                    f[2] + 1,
                    tf[2] + 1
                )?;
            }
        }
        None => {
            for f in &mesh.faces {
                writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
            }
        }
    }
    w.flush()?;
    Ok(files)
}

fn parse_err(line: usize, message: impl Into<String>) -> MeshError {
    MeshError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_index(tok: &str, count: usize, line: usize) -> Result<u32, MeshError> {
    let i: i64 = tok.parse().map_err(|_| parse_err(line, format!("bad index `{tok}`")))?;
    let resolved = if i < 0 { count as i64 + i } else { i - 1 };
    if resolved < 0 || resolved as usize >= count {
        return Err(parse_err(line, format!("index {i} out of range")));
    }
    Ok(resolved as u32)
}

/// Reads triangles (polygons are fan-triangulated); normals are ignored.
pub fn read_obj(path: &Path) -> Result<TriangleMesh, MeshError> {
    let r = BufReader::new(File::open(path)?);
    let mut vertices = Vec::new();
    let mut coords = Vec::new();
    let mut faces = Vec::new();
    let mut uv_faces = Vec::new();
    let mut any_untextured = false;
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let ln = n + 1;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let v: Vec<f64> = toks
                    .take(3)
                    .map(|t| t.parse().map_err(|_| parse_err(ln, format!("bad number `{t}`"))))
                    .collect::<Result<_, _>>()?;
                if v.len() != 3 {
                    return Err(parse_err(ln, "vertex needs 3 coordinates"));
                }
                vertices.push([v[0], v[1], v[2]]);
            }
            Some("vt") => {
                let t: Vec<f64> = toks
                    .take(2)
                    .map(|t| t.parse().map_err(|_| parse_err(ln, format!("bad number `{t}`"))))
                    .collect::<Result<_, _>>()?;
                if t.len() != 2 {
                    return Err(parse_err(ln, "texture coordinate needs 2 values"));
                }
                coords.push([t[0], 1.0 - t[1]]);
            }
            Some("f") => {
                let mut vi = Vec::new();
                let mut ti = Vec::new();
                for tok in toks {
                    let mut parts = tok.split('/');
                    vi.push(parse_index(parts.next().unwrap_or(""), vertices.len(), ln)?);
                    match parts.next() {
                        Some(t) if !t.is_empty() => ti.push(parse_index(t, coords.len(), ln)?),
                        _ => any_untextured = true,
                    }
                }
                if vi.len() < 3 {
                    return Err(parse_err(ln, "face needs at least 3 vertices"));
                }
                for k in 1..vi.len() - 1 {
                    faces.push([vi[0], vi[k], vi[k + 1]]);
                    if ti.len() == vi.len() {
                        uv_faces.push([ti[0], ti[k], ti[k + 1]]);
                    }
                }
            }
            _ => {}
        }
    }
    let uv = (!any_untextured && !faces.is_empty() && uv_faces.len() == faces.len()).then_some(UvLayer {
        coords,
        faces: uv_faces,
    });
    let mesh = TriangleMesh { vertices, faces, uv };
    mesh.validate()?;
    Ok(mesh)
}

/// Binary little-endian PLY with `double` positions; UVs, when present, go
/// in a per-face `texcoord` list.
pub fn write_ply(mesh: &TriangleMesh, path: &Path) -> Result<(), MeshError> {
    mesh.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", mesh.vertices.len())?;
    for a in ["x", "y", "z"] {
        writeln!(w, "property double {a}")?;
    }
    writeln!(w, "element face {}", mesh.faces.len())?;
    writeln!(w, "property list uchar uint vertex_indices")?;
    if mesh.uv.is_some() {
        writeln!(w, "property list uchar double texcoord")?;
    }
    writeln!(w, "end_header")?;
    for v in &mesh.vertices {
        for c in v {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    for f in 0..mesh.faces.len() {
        w.write_all(&[3u8])?;
        for i in mesh.faces[f] {
            w.write_all(&i.to_le_bytes())?;
        }
        if let Some(t) = mesh.face_uvs(f) {
            w.write_all(&[6u8])?;
            for c in t.iter().flatten() {
                w.write_all(&c.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N], MeshError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Reads files in the layout produced by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<TriangleMesh, MeshError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(parse_err(header.len() + 1, "missing end_header"));
        }
        let line = line.trim().to_owned();
        if line == "end_header" {
            break;
        }
        header.push(line);
    }
    let expect = |i: usize, want: &str| -> Result<(), MeshError> {
        match header.get(i) {
            Some(h) if h == want => Ok(()),
            other => Err(parse_err(i + 1, format!("expected `{want}`, got {other:?}"))),
        }
    };
    expect(0, "ply")?;
    expect(1, "format binary_little_endian 1.0")?;
    let count = |i: usize, elem: &str| -> Result<usize, MeshError> {
        header
            .get(i)
            .and_then(|h| h.strip_prefix(&format!("element {elem} ")))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| parse_err(i + 1, format!("expected `element {elem} N`")))
    };
    let nv = count(2, "vertex")?;
    expect(3, "property double x")?;
    expect(4, "property double y")?;
    expect(5, "property double z")?;
    let nf = count(6, "face")?;
    expect(7, "property list uchar uint vertex_indices")?;
    let textured = match header.len() {
        8 => false,
        9 => {
            expect(8, "property list uchar double texcoord")?;
            true
        }
        _ => return Err(parse_err(9, "unexpected header property")),
    };
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let mut v = [0.0; 3];
        for c in &mut v {
            *c = f64::from_le_bytes(read_exact(&mut r)?);
        }
        vertices.push(v);
    }
    let mut faces = Vec::with_capacity(nf);
    let mut uv = UvLayer::default();
    for _ in 0..nf {
        if read_exact::<1>(&mut r)?[0] != 3 {
            return Err(MeshError::Invalid("only triangles are supported".into()));
        }
        let mut f = [0u32; 3];
        for i in &mut f {
            *i = u32::from_le_bytes(read_exact(&mut r)?);
        }
        faces.push(f);
        if textured {
            if read_exact::<1>(&mut r)?[0] != 6 {
                return Err(MeshError::Invalid("texcoord list must hold 6 values".into()));
            }
            let base = uv.coords.len() as u32;
            for _ in 0..3 {
                let u = f64::from_le_bytes(read_exact(&mut r)?);
                let v = f64::from_le_bytes(read_exact(&mut r)?);
                uv.coords.push([u, v]);
            }
            uv.faces.push([base, base + 1, base + 2]);
        }
    }
    let mesh = TriangleMesh {
        vertices,
        faces,
        uv: textured.then_some(uv),
    };
    mesh.validate()?;
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_uv_atlas, AtlasConfig};
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn unit_cube() -> TriangleMesh {
        let mut v = Vec::new();
        for i in 0..8 {
            v.push([(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]);
        }
        let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
        let mut f = Vec::new();
        for q in quads {
            f.push([q[0], q[1], q[2]]);
            f.push([q[0], q[2], q[3]]);
        }
        TriangleMesh::new(v, f).unwrap()
    }

    #[test]
    fn cube_round_trips_through_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let cube = unit_cube();
        assert!(cube.is_watertight());
        write_obj(&cube, None, &dir.path().join("c.obj")).unwrap();
        let back = read_obj(&dir.path().join("c.obj")).unwrap();
        assert_eq!(back.vertices.len(), 8);
        assert_eq!(back.faces.len(), 12);
        assert_eq!(back, cube);
        write_ply(&cube, &dir.path().join("c.ply")).unwrap();
        assert_eq!(read_ply(&dir.path().join("c.ply")).unwrap(), cube);
    }

    #[test]
    fn obj_indices_are_one_based_and_texture_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let atlas = generate_uv_atlas(&unit_cube(), &AtlasConfig { texels_per_unit: 8.0, ..AtlasConfig::default() }).unwrap();
        let tex = Image::solid(atlas.resolution, atlas.resolution, [0.2, 0.4, 0.6]);
        let files = write_obj(&atlas.mesh, Some(&tex), &dir.path().join("m.obj")).unwrap();
        let text = std::fs::read_to_string(&files.obj).unwrap();
        assert!(text.contains("mtllib m.mtl"));
        let first = text.lines().find(|l| l.starts_with("f ")).unwrap();
        assert_eq!(first, "f 1/1 3/2 4/3");
        assert!(!text.lines().any(|l| l.starts_with("f ") && l.split_whitespace().any(|t| t.starts_with("0"))));
        let mtl = std::fs::read_to_string(files.mtl.unwrap()).unwrap();
        assert!(mtl.contains("map_Kd m.png"));
        let png = Image::read_png(&files.texture.unwrap()).unwrap();
        assert_eq!(png.width, atlas.resolution);
        let back = read_obj(&files.obj).unwrap();
        assert_eq!(back.faces, atlas.mesh.faces);
        let (a, b) = (back.uv.unwrap(), atlas.mesh.uv.unwrap());
        assert_eq!(a.faces, b.faces);
        for (p, q) in a.coords.iter().zip(&b.coords) {
            assert!((p[0] - q[0]).abs() < 1e-6 && (p[1] - q[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.obj");
        std::fs::write(&p, "v 0 0 0\nf 1 2 3\n").unwrap();
        assert!(matches!(read_obj(&p), Err(MeshError::Parse { line: 2, .. })));
        let p = dir.path().join("bad.ply");
        std::fs::write(&p, "ply\nformat ascii 1.0\nend_header\n").unwrap();
        assert!(read_ply(&p).is_err());
        let cube = unit_cube();
        let p = dir.path().join("t.ply");
        write_ply(&cube, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_ply(&p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn ply_round_trip_is_bitwise(verts in prop::collection::vec(prop::array::uniform3(-1e3f64..1e3), 3..40), seed in 0u32..1000) {
            let n = verts.len() as u32;
            let faces: Vec<[u32; 3]> = (0..n).map(|i| [i, (i + 1 + seed % n) % n, (i * 7 + seed) % n]).collect();
            let mut mesh = TriangleMesh::new(verts, faces).unwrap();
            mesh.uv = Some(UvLayer {
                coords: (0..3 * n).map(|i| [i as f64 / 7.0, 1.0 / (i as f64 + 3.0)]).collect(),
                faces: (0..n).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect(),
            });
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.ply");
            write_ply(&mesh, &p).unwrap();
            prop_assert_eq!(read_ply(&p).unwrap(), mesh.clone());
            let o = dir.path().join("r.obj");
            write_obj(&mesh, None, &o).unwrap();
            let back = read_obj(&o).unwrap();
            prop_assert_eq!(&back.faces, &mesh.faces);
            for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
                for d in 0..3 {
                    prop_assert!((a[d] - b[d]).abs() <= 1e-6 * b[d].abs().max(1.0));
                }
            }
        }
    }
}
