//! Connected components and floater removal.

use super::{norm, sub, TriangleMesh};

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

/// Face lists of the vertex-connected components, ordered by first face.
pub fn connected_components(mesh: &TriangleMesh) -> Vec<Vec<usize>> {
    let mut parent: Vec<u32> = (0..mesh.vertices.len() as u32).collect();
    for f in &mesh.faces {
        for e in 1..3 {
            let a = find(&mut parent, f[0]);
            let b = find(&mut parent, f[e]);
            if a != b {
                parent[a.max(b) as usize] = a.min(b);
            }
        }
    }
    let mut slot = vec![usize::MAX; mesh.vertices.len()];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for (fi, f) in mesh.faces.iter().enumerate() {
        let root = find(&mut parent, f[0]) as usize;
        if slot[root] == usize::MAX {
            slot[root] = comps.len();
            comps.push(Vec::new());
        }
        comps[slot[root]].push(fi);
    }
    comps
}

/// Keeps the component with the highest `triangles / (1 + d)`, where `d` is
/// the distance from its face-centroid mean to `center`.
pub fn select_main_component(mesh: &TriangleMesh, center: [f64; 3]) -> TriangleMesh {
    let comps = connected_components(mesh);
    let score = |faces: &Vec<usize>| {
        let mut c = [0.0; 3];
        for &f in faces {
            for p in mesh.triangle(f) {
                for d in 0..3 {
                    c[d] += p[d];
                }
            }
        }
        let k = 3.0 * faces.len() as f64;
        let dist = norm(sub(c.map(|v| v / k), center));
        faces.len() as f64 / (1.0 + dist)
    };
    let mut best: Option<(f64, &Vec<usize>)> = None;
    for comp in &comps {
        let s = score(comp);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, comp));
        }
    }
    match best {
        Some((_, faces)) => mesh.subset(faces),
        None => TriangleMesh::default(),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::super::{marching_cubes, Bounds, VoxelGrid};
    use super::*;

    fn shifted(m: &TriangleMesh, by: [f64; 3]) -> TriangleMesh {
        TriangleMesh {
            vertices: m.vertices.iter().map(|v| [v[0] + by[0], v[1] + by[1], v[2] + by[2]]).collect(),
            ..m.clone()
        }
    }

    fn merged(a: &TriangleMesh, b: &TriangleMesh) -> TriangleMesh {
        let off = a.vertices.len() as u32;
        let mut m = a.clone();
        m.vertices.extend(&b.vertices);
        m.faces.extend(b.faces.iter().map(|f| f.map(|i| i + off)));
        m
    }

    /// Sphere at the origin plus a small box floater in a corner.
    pub(crate) fn floater_fixture() -> TriangleMesh {
        let g = VoxelGrid::from_fn(32, Bounds::cube(1.0), |p| {
            let sphere = norm(p) - 0.5;
            let q = p.map(|c| (c - 0.8).abs() - 0.1);
            let outside = norm(q.map(|c| c.max(0.0)));
            let cube = outside + q[0].max(q[1]).max(q[2]).min(0.0);
            sphere.min(cube)
        })
        .unwrap();
        marching_cubes(&g, 0.0)
    }

    #[test]
    fn floater_is_removed() {
        let m = floater_fixture();
        assert_eq!(connected_components(&m).len(), 2);
        let main = select_main_component(&m, [0.0; 3]);
        assert_eq!(connected_components(&main).len(), 1);
        assert!(main.faces.len() < m.faces.len());
        assert!(main.vertices.iter().all(|v| (norm(*v) - 0.5).abs() < 0.1));
        assert!(main.is_watertight());
    }

    #[test]
    fn single_component_is_unchanged() {
        let g = VoxelGrid::from_fn(16, Bounds::cube(1.0), |p| norm(p) - 0.5).unwrap();
        let m = marching_cubes(&g, 0.0);
        assert_eq!(select_main_component(&m, [0.0; 3]), m);
    }

    #[test]
    fn equal_components_prefer_the_central_one() {
        let g = VoxelGrid::from_fn(16, Bounds::cube(1.0), |p| norm(p) - 0.3).unwrap();
        let m = marching_cubes(&g, 0.0);
        let two = merged(&shifted(&m, [2.0, 0.0, 0.0]), &m);
        let main = select_main_component(&two, [0.0; 3]);
        assert_eq!(main.faces.len(), m.faces.len());
        assert!(main.vertices.iter().all(|v| v[0].abs() < 0.5));
    }

    #[test]
    fn empty_mesh_stays_empty() {
        assert!(select_main_component(&TriangleMesh::default(), [0.0; 3]).is_empty());
    }
}
