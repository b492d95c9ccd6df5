//! The 256-case marching-cubes triangle table, built from face rules.
//!
//! Corner `i` sits at `(i & 1, (i >> 1) & 1, (i >> 2) & 1)`; a corner is
//! inside when its value is negative. On every cube face the boundary
//! crossings are paired so that each run of inside corners is cut off on its
//! own. Both cubes sharing a face apply the same rule to the same four
//! values, so neighboring polygons agree along the face and the resulting
//! surface is closed. Segments are oriented per face, chained into loops and
//! fan-triangulated with the outward (positive side) winding.

use std::sync::OnceLock;

/// The two corners of each of the 12 edges.
pub const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

pub fn corner_offset(i: usize) -> [usize; 3] {
    [i & 1, (i >> 1) & 1, (i >> 2) & 1]
}

fn edge_index(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|&(p, q)| (p, q) == (a, b) || (p, q) == (b, a))
        .expect("corners share an edge")
}

/// Corners of each face in counter-clockwise order seen from outside.
fn faces() -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for a in 0..3 {
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        for side in 0..2 {
            let corner = |u: usize, v: usize| (side << a) | (u << b) | (v << c);
            let mut f = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            if side == 0 {
                f.reverse();
            }
            out.push(f);
        }
    }
    out
}

fn build_case(case: usize, faces: &[[usize; 4]]) -> Vec<[usize; 3]> {
    let inside = |c: usize| case >> c & 1 == 1;
    // next[e] = edge that follows edge e along its loop
    let mut next = [usize::MAX; 12];
    for f in faces {
        // crossing edges in counter-clockwise order with their direction
        let crossings: Vec<(usize, bool)> = (0..4)
            .filter_map(|k| {
                let (p, q) = (f[k], f[(k + 1) % 4]);
                (inside(p) != inside(q)).then(|| (edge_index(p, q), inside(q)))
            })
            .collect();
        for (k, &(e, entering)) in crossings.iter().enumerate() {
            if entering {
                // the run of inside corners that starts here ends at the next crossing
                let (exit, _) = crossings[(k + 1) % crossings.len()];
                next[e] = exit;
            }
        }
    }
    let mut seen = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if next[start] == usize::MAX || seen[start] {
            continue;
        }
        let mut cycle = vec![start];
        seen[start] = true;
        let mut e = next[start];
        while e != start {
            seen[e] = true;
            cycle.push(e);
            e = next[e];
        }
        for k in 1..cycle.len() - 1 {
            tris.push([cycle[0], cycle[k], cycle[k + 1]]);
        }
    }
    tris
}

fn build() -> Vec<Vec<[usize; 3]>> {
    let faces = faces();
    let mut table: Vec<Vec<[usize; 3]>> = (0..256).map(|c| build_case(c, &faces)).collect();
    // fix the global winding so normals point away from the inside corners
    let mid = |e: usize| -> [f64; 3] {
        let (a, b) = (corner_offset(EDGES[e].0), corner_offset(EDGES[e].1));
        [0, 1, 2].map(|k| 0.5 * (a[k] + b[k]) as f64)
    };
    let [a, b, c] = table[1][0].map(mid);
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    // corner 0 is the only inside corner of case 1: outward is +(1,1,1)
    if n[0] + n[1] + n[2] < 0.0 {
        for tris in &mut table {
            for t in tris.iter_mut() {
                t.swap(1, 2);
            }
        }
    }
    table
}

/// Triangles (as edge indices) for each corner sign pattern.
pub fn triangle_table() -> &'static [Vec<[usize; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(build)
}
