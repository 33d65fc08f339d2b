use crate::error::{Error, Result};
use crate::geometry::{sq_dist, FeatureCloud};

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Exact nearest-neighbour index over a fixed reference cloud.
///
/// Results are bit-identical to an exhaustive scan: distances come from
/// [`sq_dist`] on the original coordinates and ties go to the lowest
/// reference index.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<f64>,
    ids: Vec<u32>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(reference: &FeatureCloud) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::EmptyCloud("nearest-neighbour reference"));
        }
        let dim = reference.dim();
        let mut order: Vec<u32> = (0..reference.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * reference.len() / LEAF_SIZE + 1);
        build_node(reference, &mut order, 0, &mut nodes);
        let mut points = Vec::with_capacity(reference.as_slice().len());
        for &i in &order {
            points.extend_from_slice(reference.point(i as usize));
        }
        Ok(KdTree {
            dim,
            points,
            ids: order,
            nodes,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Squared distance and index of the nearest reference point.
    pub fn nearest(&self, q: &[f64]) -> (f64, u32) {
        debug_assert_eq!(q.len(), self.dim);
        let mut best = (f64::INFINITY, u32::MAX);
        self.search(0, q, &mut best);
        best
    }

    fn search(&self, node: usize, q: &[f64], best: &mut (f64, u32)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let p = &self.points[slot * self.dim..(slot + 1) * self.dim];
                    let d = sq_dist(q, p);
                    let id = self.ids[slot];
                    if d < best.0 || (d == best.0 && id < best.1) {
                        *best = (d, id);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // `<=` keeps equidistant points reachable for the tie rule.
                if diff * diff <= best.0 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

fn build_node(cloud: &FeatureCloud, order: &mut [u32], offset: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return id;
    }
    let dim = cloud.dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for &i in order.iter() {
        for (a, v) in cloud.point(i as usize).iter().enumerate() {
            lo[a] = lo[a].min(*v);
            hi[a] = hi[a].max(*v);
        }
    }
    let axis = (0..dim)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    if hi[axis] - lo[axis] <= 0.0 {
        // All points coincide; a single leaf is exact.
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return id;
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        cloud.point(a as usize)[axis].total_cmp(&cloud.point(b as usize)[axis])
    });
    let value = cloud.point(order[mid] as usize)[axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (l, r) = order.split_at_mut(mid);
    let left = build_node(cloud, l, offset, nodes);
    let right = build_node(cloud, r, offset + mid, nodes);
    nodes[id] = Node::Split { axis, value, left, right };
    id
}
