//! Bounding-volume hierarchy over reflective splat disks.

use crate::consts::MIN_ALPHA;
use crate::math::Vec3;
use crate::scene::{normal_of, GaussianPrimitive};

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&o.min),
            max: self.max.sup(&o.max),
        }
    }

    pub fn contains(&self, o: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= o.min[i] && self.max[i] >= o.max[i])
    }

    pub fn centroid(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    /// Slab test against the ray segment `[t_min, inf)`.
    pub fn hit_by(&self, origin: &Vec3, dir: &Vec3, t_min: f64) -> bool {
        let mut t0 = t_min;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i] == 0.0 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return false;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (mut a, mut b) = (
                (self.min[i] - origin[i]) * inv,
                (self.max[i] - origin[i]) * inv,
            );
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

/// Cutoff radius (in units of the tangent scales) beyond which a splat's
/// weighted density falls below `MIN_ALPHA`.
pub fn cutoff_sigma(opacity: f64) -> f64 {
    if opacity <= MIN_ALPHA {
        0.0
    } else {
        (2.0 * (opacity / MIN_ALPHA).ln()).sqrt()
    }
}

/// World bounds of the disk of radius `cutoff * max(s_u, s_v)` around a splat.
pub fn splat_bounds(g: &GaussianPrimitive) -> Aabb {
    let r = cutoff_sigma(g.opacity) * g.max_scale();
    let n = normal_of(g).unwrap_or_else(|_| Vec3::zeros());
    let half = Vec3::from_fn(|i, _| r * (1.0 - n[i] * n[i]).max(0.0).sqrt());
    // Pad so rounding in the slab test never drops a grazing disk.
    let pad = half.map(|h| h * 1e-9) + g.position.map(|p| p.abs() * 1e-12) + Vec3::repeat(1e-12);
    Aabb {
        min: g.position - half - pad,
        max: g.position + half + pad,
    }
}

#[derive(Debug, Clone, Copy)]
enum NodeKind {
    Leaf { start: usize, count: usize },
    Inner { left: usize, right: usize },
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    kind: NodeKind,
}

/// Binary BVH with median splits; leaves reference `prims[start..start+count]`.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    prims: Vec<usize>,
    bounds: Vec<Aabb>,
}

impl Bvh {
    pub fn build(gaussians: &[GaussianPrimitive]) -> Self {
        let bounds: Vec<Aabb> = gaussians.iter().map(splat_bounds).collect();
        let mut prims: Vec<usize> = (0..gaussians.len()).collect();
        let mut nodes = Vec::new();
        if !prims.is_empty() {
            build_node(&bounds, &mut prims, 0, gaussians.len(), &mut nodes);
        }
        Self {
            nodes,
            prims,
            bounds,
        }
    }

    pub fn len(&self) -> usize {
        self.prims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prims.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Calls `visit` for every primitive whose leaf box the ray enters;
    /// returns the number of nodes visited.
    pub fn traverse(
        &self,
        origin: &Vec3,
        dir: &Vec3,
        t_min: f64,
        mut visit: impl FnMut(usize),
    ) -> u64 {
        if self.nodes.is_empty() {
            return 0;
        }
        let mut visited = 0u64;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            visited += 1;
            let node = &self.nodes[ni];
            if !node.bounds.hit_by(origin, dir, t_min) {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &p in &self.prims[start..start + count] {
                        if self.bounds[p].hit_by(origin, dir, t_min) {
                            visit(p);
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        visited
    }

    /// Checks the structural invariants: each primitive in exactly one leaf
    /// and children contained in their parents.
    pub fn check_invariants(&self) -> bool {
        let mut seen = vec![0usize; self.bounds.len()];
        for node in &self.nodes {
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &p in &self.prims[start..start + count] {
                        seen[p] += 1;
                        if !node.bounds.contains(&self.bounds[p]) {
                            return false;
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    if !node.bounds.contains(&self.nodes[left].bounds)
                        || !node.bounds.contains(&self.nodes[right].bounds)
                    {
                        return false;
                    }
                }
            }
        }
        seen.iter().all(|&c| c == 1)
    }
}

fn build_node(
    bounds: &[Aabb],
    prims: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let slice = &mut prims[start..end];
    let node_bounds = slice
        .iter()
        .fold(Aabb::empty(), |acc, &p| acc.union(&bounds[p]));
    let me = nodes.len();
    nodes.push(Node {
        bounds: node_bounds,
        kind: NodeKind::Leaf {
            start,
            count: end - start,
        },
    });
    if end - start <= LEAF_SIZE {
        return me;
    }
    let centroid_bounds = slice.iter().fold(Aabb::empty(), |acc, &p| {
        let c = bounds[p].centroid();
        acc.union(&Aabb { min: c, max: c })
    });
    let extent = centroid_bounds.max - centroid_bounds.min;
    let axis = extent.imax();
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        bounds[a].centroid()[axis]
            .total_cmp(&bounds[b].centroid()[axis])
            .then(a.cmp(&b))
    });
    let left = build_node(bounds, prims, start, start + mid, nodes);
    let right = build_node(bounds, prims, start + mid, end, nodes);
    nodes[me].kind = NodeKind::Inner { left, right };
    me
}
