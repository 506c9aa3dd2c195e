//! Marching cubes over a [`VoxelGrid`].

use std::collections::HashMap;

use rayon::prelude::*;

use super::tables::TRI_TABLE;
use super::{cross, norm, sub, TriangleMesh, VoxelGrid};

/// Cube corner offsets in the table's corner order.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs joined by each of the 12 edges.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [3, 2],
    [0, 3],
    [4, 5],
    [5, 6],
    [7, 6],
    [4, 7],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Interpolation parameters this close to an endpoint snap onto it, so that
/// near-corner crossings weld instead of leaving slivers.
const SNAP: f64 = 1e-9;

/// Faces smaller than this are dropped.
const MIN_AREA: f64 = 1e-12;

/// Lattice edge identified by its lower endpoint and axis.
type EdgeKey = u64;

fn edge_key(grid: &VoxelGrid, lower: [usize; 3], axis: usize) -> EdgeKey {
    grid.index(lower[0], lower[1], lower[2]) as u64 * 3 + axis as u64
}

fn edge_vertex(grid: &VoxelGrid, key: EdgeKey, iso: f64) -> [f64; 3] {
    let n = grid.resolution;
    let axis = (key % 3) as usize;
    let idx = (key / 3) as usize;
    let lo = [idx % n, (idx / n) % n, idx / (n * n)];
    let mut hi = lo;
    hi[axis] += 1;
    let va = grid.value(lo[0], lo[1], lo[2]);
    let vb = grid.value(hi[0], hi[1], hi[2]);
    let pa = grid.point(lo[0], lo[1], lo[2]);
    let pb = grid.point(hi[0], hi[1], hi[2]);
    let mut t = (iso - va) / (vb - va);
    if t < SNAP {
        t = 0.0;
    } else if t > 1.0 - SNAP {
        t = 1.0;
    }
    let mut p = pa;
    p[axis] = pa[axis] + t * (pb[axis] - pa[axis]);
    if t == 1.0 {
        p = pb;
    }
    p
}

/// Triangles of one z-slab of cells, as edge-key triples.
fn slab(grid: &VoxelGrid, k: usize, iso: f64) -> Vec<[EdgeKey; 3]> {
    let n = grid.resolution;
    let mut tris = Vec::new();
    for j in 0..n - 1 {
        for i in 0..n - 1 {
            let base = [i, j, k];
            let mut case = 0usize;
            for (c, off) in CORNERS.iter().enumerate() {
                if grid.value(i + off[0], j + off[1], k + off[2]) < iso {
                    case |= 1 << c;
                }
            }
            if case == 0 || case == 255 {
                continue;
            }
            let keys = EDGES.map(|[a, b]| {
                let (ca, cb) = (CORNERS[a], CORNERS[b]);
                let axis = (0..3).find(|&d| ca[d] != cb[d]).expect("edge spans one axis");
                let lower = [0, 1, 2].map(|d| base[d] + ca[d].min(cb[d]));
                edge_key(grid, lower, axis)
            });
            for tri in TRI_TABLE[case].chunks(3) {
                if tri[0] < 0 {
                    break;
                }
                // Table winding faces the inside; reverse it so normals point
                // toward increasing values.
                tris.push([keys[tri[0] as usize], keys[tri[2] as usize], keys[tri[1] as usize]]);
            }
        }
    }
    tris
}

/// Extracts the `iso` level set with normals pointing toward larger values.
/// Coincident vertices are welded and faces below `1e-12` area dropped.
pub fn marching_cubes(grid: &VoxelGrid, iso: f64) -> TriangleMesh {
    let n = grid.resolution;
    let slabs: Vec<Vec<[EdgeKey; 3]>> = (0..n - 1).into_par_iter().map(|k| slab(grid, k, iso)).collect();

    let mut by_key: HashMap<EdgeKey, u32> = HashMap::new();
    let mut by_pos: HashMap<[u64; 3], u32> = HashMap::new();
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces = Vec::new();
    for tri in slabs.iter().flatten() {
        let f = tri.map(|key| {
            *by_key.entry(key).or_insert_with(|| {
                let p = edge_vertex(grid, key, iso);
                *by_pos.entry(p.map(|c| (c + 0.0).to_bits())).or_insert_with(|| {
                    vertices.push(p);
                    (vertices.len() - 1) as u32
                })
            })
        });
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            continue;
        }
        let [a, b, c] = f.map(|i| vertices[i as usize]);
        if 0.5 * norm(cross(sub(b, a), sub(c, a))) < MIN_AREA {
            continue;
        }
        faces.push(f);
    }
    let mesh = TriangleMesh {
        vertices,
        faces,
        uv: None,
    };
    let all: Vec<usize> = (0..mesh.faces.len()).collect();
    mesh.subset(&all)
}

#[cfg(test)]
mod tests {
    use super::super::{dot, Bounds};
    use super::*;
    use proptest::prelude::*;

    fn sphere(n: usize, r: f64) -> VoxelGrid {
        VoxelGrid::from_fn(n, Bounds::cube(1.0), |p| norm(p) - r).unwrap()
    }

    #[test]
    fn sphere_vertices_lie_on_shell_and_surface_is_closed() {
        let g = sphere(64, 0.5);
        let h = g.spacing()[0];
        let m = marching_cubes(&g, 0.0);
        assert!(m.faces.len() > 1000);
        for v in &m.vertices {
            assert!((norm(*v) - 0.5).abs() < 1.5 * h);
        }
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        for f in 0..m.faces.len() {
            let [a, b, c] = m.triangle(f);
            let centroid = [0, 1, 2].map(|d| (a[d] + b[d] + c[d]) / 3.0);
            assert!(dot(m.face_normal(f), centroid) > 0.0, "face {f} points inward");
            assert!(m.face_area(f) >= MIN_AREA);
        }
    }

    #[test]
    fn constant_sign_grid_gives_empty_mesh() {
        let g = VoxelGrid::from_fn(8, Bounds::cube(1.0), |_| 1.0).unwrap();
        assert!(marching_cubes(&g, 0.0).is_empty());
        let g = VoxelGrid::from_fn(8, Bounds::cube(1.0), |_| -1.0).unwrap();
        assert!(marching_cubes(&g, 0.0).is_empty());
    }

    #[test]
    fn plane_is_reproduced() {
        let g = VoxelGrid::from_fn(16, Bounds::cube(1.0), |p| p[0] - 0.1).unwrap();
        let m = marching_cubes(&g, 0.0);
        assert!(!m.is_empty());
        for v in &m.vertices {
            assert!((v[0] - 0.1).abs() < 1e-12, "{v:?}");
        }
        for f in 0..m.faces.len() {
            assert!(m.face_normal(f)[0] > 0.0);
        }
    }

    #[test]
    fn torus_has_genus_one() {
        let g = VoxelGrid::from_fn(48, Bounds::cube(1.0), |p| {
            let q = (p[0] * p[0] + p[2] * p[2]).sqrt() - 0.5;
            (q * q + p[1] * p[1]).sqrt() - 0.2
        })
        .unwrap();
        let m = marching_cubes(&g, 0.0);
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn random_planes_are_exact(nx in -1.0f64..1.0, ny in -1.0f64..1.0, nz in -1.0f64..1.0, d in -0.3f64..0.3) {
            prop_assume!(nx.abs() + ny.abs() + nz.abs() > 0.1);
            let nrm = [nx, ny, nz];
            let g = VoxelGrid::from_fn(12, Bounds::cube(1.0), |p| dot(p, nrm) - d).unwrap();
            let m = marching_cubes(&g, 0.0);
            for v in &m.vertices {
                prop_assert!((dot(*v, nrm) - d).abs() < 1e-12);
            }
            for f in 0..m.faces.len() {
                prop_assert!(dot(m.face_normal(f), nrm) > 0.0);
            }
        }

        #[test]
        fn random_spheres_are_closed(r in 0.2f64..0.8, cx in -0.1f64..0.1, n in 12usize..28) {
            let g = VoxelGrid::from_fn(n, Bounds::cube(1.0), |p| norm([p[0] - cx, p[1], p[2]]) - r).unwrap();
            let m = marching_cubes(&g, 0.0);
            prop_assert!(m.is_watertight());
            prop_assert_eq!(m.euler_characteristic(), 2);
        }
    }
}
