//! Depth-based edge classification into reflection / shared / background.

use std::path::Path;

use crate::depth::EdgeDepthMap;
use crate::error::{Error, Result};
use crate::image::{EdgeImage, Image, Mask};
use crate::scalar::Scalar;

/// Decision boundaries between the three depth clusters, `k1 < k2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthThresholds {
    pub k1: f64,
    pub k2: f64,
}

impl DepthThresholds {
    pub fn new(k1: f64, k2: f64) -> Result<Self> {
        if !(k1.is_finite() && k2.is_finite() && k2 > k1) {
            return Err(Error::Config(format!("thresholds need K2 > K1, got {k1}, {k2}")));
        }
        Ok(Self { k1, k2 })
    }
}

/// Globally optimal 1-D k-means partition of sorted data.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    /// Ascending centroids.
    pub centroids: Vec<f64>,
    /// Exclusive end index of each cluster in the sorted input.
    pub ends: Vec<usize>,
    pub sorted: Vec<f64>,
}

impl Clustering {
    /// Midpoints between consecutive centroids.
    pub fn boundaries(&self) -> Vec<f64> {
        self.centroids.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }
}

struct Prefix {
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Prefix {
    fn new(xs: &[f64]) -> Self {
        let mut s1 = vec![0.0; xs.len() + 1];
        let mut s2 = vec![0.0; xs.len() + 1];
        for (i, &x) in xs.iter().enumerate() {
            s1[i + 1] = s1[i] + x;
            s2[i + 1] = s2[i] + x * x;
        }
        Self { s1, s2 }
    }

    /// Within-cluster sum of squares of `xs[i..j]`.
    fn cost(&self, i: usize, j: usize) -> f64 {
        if j <= i {
            return 0.0;
        }
        let n = (j - i) as f64;
        let s = self.s1[j] - self.s1[i];
        (self.s2[j] - self.s2[i] - s * s / n).max(0.0)
    }
}

/// Exact 1-D k-means by dynamic programming over contiguous partitions of
/// the sorted values, with divide-and-conquer over the monotone split points.
pub fn kmeans_1d(values: &[f64], k: usize) -> Result<Clustering> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("k-means input must be finite".into()));
    }
    let mut xs = values.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let mut distinct = xs.clone();
    distinct.dedup();
    if k == 0 || distinct.len() < k {
        return Err(Error::DegenerateDepths {
            distinct: distinct.len(),
        });
    }
    let n = xs.len();
    let pre = Prefix::new(&xs);
    // cost[j] = best cost of the first j points in `layer` clusters
    let mut prev: Vec<f64> = (0..=n).map(|j| pre.cost(0, j)).collect();
    let mut splits: Vec<Vec<usize>> = vec![vec![0; n + 1]];
    for layer in 1..k {
        let mut cur = vec![f64::INFINITY; n + 1];
        let mut arg = vec![0usize; n + 1];
        solve_layer(&pre, &prev, &mut cur, &mut arg, layer + 1, n, layer, n);
        splits.push(arg);
        prev = cur;
    }
    let mut ends = vec![n; k];
    let mut j = n;
    for layer in (1..k).rev() {
        let i = splits[layer][j];
        ends[layer - 1] = i;
        j = i;
    }
    let mut start = 0;
    let centroids = ends
        .iter()
        .map(|&end| {
            let c = (pre.s1[end] - pre.s1[start]) / (end - start) as f64;
            start = end;
            c
        })
        .collect();
    Ok(Clustering {
        centroids,
        ends,
        sorted: xs,
    })
}

/// Fills `cur[j]` for `j in lo..=hi` knowing the optimal split lies in
/// `opt_lo..=opt_hi`.
#[allow(clippy::too_many_arguments)]
fn solve_layer(
    pre: &Prefix,
    prev: &[f64],
    cur: &mut [f64],
    arg: &mut [usize],
    lo: usize,
    hi: usize,
    opt_lo: usize,
    opt_hi: usize,
) {
    if lo > hi {
        return;
    }
    let mid = (lo + hi) / 2;
    let mut best = f64::INFINITY;
    let mut best_i = opt_lo;
    // last cluster is xs[i..mid], needs i < mid
    for i in opt_lo..=opt_hi.min(mid - 1) {
        let c = prev[i] + pre.cost(i, mid);
        if c < best {
            best = c;
            best_i = i;
        }
    }
    cur[mid] = best;
    arg[mid] = best_i;
    if mid > lo {
        solve_layer(pre, prev, cur, arg, lo, mid - 1, opt_lo, best_i);
    }
    solve_layer(pre, prev, cur, arg, mid + 1, hi, best_i, opt_hi);
}

/// Three-cluster k-means over edge disparities; thresholds are the centroid
/// midpoints.
pub fn kmeans_thresholds(depths: &[f64]) -> Result<DepthThresholds> {
    let b = kmeans_1d(depths, 3)?.boundaries();
    DepthThresholds::new(b[0], b[1])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeLabel {
    None,
    Reflection,
    Shared,
    Background,
}

/// Per-pixel layer labels; `None` off the edge support.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeLayerLabels {
    height: usize,
    width: usize,
    labels: Vec<EdgeLabel>,
}

impl EdgeLayerLabels {
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> EdgeLabel) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            labels,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> EdgeLabel {
        self.labels[y * self.width + x]
    }

    pub fn labels(&self) -> &[EdgeLabel] {
        &self.labels
    }

    pub fn count(&self, label: EdgeLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn mask(&self, label: EdgeLabel) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| self.get(y, x) == label)
    }

    /// Debug rendering: black / red / yellow / green.
    pub fn to_image<T: Scalar>(&self) -> Image<T> {
        let color = |l: EdgeLabel| match l {
            EdgeLabel::None => [0.0, 0.0, 0.0],
            EdgeLabel::Reflection => [1.0, 0.0, 0.0],
            EdgeLabel::Shared => [1.0, 1.0, 0.0],
            EdgeLabel::Background => [0.0, 1.0, 0.0],
        };
        Image::from_fn(3, self.height, self.width, |c, y, x| {
            T::lit(color(self.get(y, x))[c])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_image::<f32>().save_png(path)
    }
}

/// Labels every valid pixel of `depth`. With `bg_is_far` the background owns
/// the small-disparity side (far layers move less between views); otherwise
/// the two outer labels swap.
pub fn classify_edges<T: Scalar>(
    depth: &EdgeDepthMap<T>,
    t: DepthThresholds,
    bg_is_far: bool,
) -> EdgeLayerLabels {
    let (h, w) = depth.valid_mask.dims();
    let (low, high) = if bg_is_far {
        (EdgeLabel::Background, EdgeLabel::Reflection)
    } else {
        (EdgeLabel::Reflection, EdgeLabel::Background)
    };
    EdgeLayerLabels::from_fn(h, w, |y, x| {
        if !depth.valid_mask.get(y, x) {
            return EdgeLabel::None;
        }
        let d = depth.values.get(0, y, x).to_f64_lossy();
        if d < t.k1 {
            low
        } else if d > t.k2 {
            high
        } else {
            EdgeLabel::Shared
        }
    })
}

/// Two-cluster split used when edge regeneration is disabled: each valid
/// pixel joins the nearer centroid and shared edges do not exist.
pub fn classify_two_clusters<T: Scalar>(
    depth: &EdgeDepthMap<T>,
    bg_is_far: bool,
    border: usize,
) -> Result<EdgeLayerLabels> {
    let values: Vec<f64> = depth
        .edge_values(border)
        .iter()
        .map(|v| v.to_f64_lossy())
        .collect();
    let split = kmeans_1d(&values, 2)?.boundaries()[0];
    let (h, w) = depth.valid_mask.dims();
    let (low, high) = if bg_is_far {
        (EdgeLabel::Background, EdgeLabel::Reflection)
    } else {
        (EdgeLabel::Reflection, EdgeLabel::Background)
    };
    Ok(EdgeLayerLabels::from_fn(h, w, |y, x| {
        if !depth.valid_mask.get(y, x) {
            EdgeLabel::None
        } else if depth.values.get(0, y, x).to_f64_lossy() < split {
            low
        } else {
            high
        }
    }))
}

/// Initial background / reflection edges and the background edge support.
#[derive(Clone, Debug)]
pub struct InitialEdges<T> {
    pub e_b0: EdgeImage<T>,
    pub e_r0: EdgeImage<T>,
    pub m_b0: Mask,
}

pub fn initial_edge_estimates<T: Scalar>(
    edges: &EdgeImage<T>,
    labels: &EdgeLayerLabels,
) -> Result<InitialEdges<T>> {
    if edges.dims() != labels.dims() {
        return Err(Error::Shape(format!(
            "edges {:?} vs labels {:?}",
            edges.dims(),
            labels.dims()
        )));
    }
    let (h, w) = edges.dims();
    let pick = |want: EdgeLabel| {
        Image::from_fn(edges.channels(), h, w, |c, y, x| {
            if labels.get(y, x) == want {
                edges.get(c, y, x)
            } else {
                T::zero()
            }
        })
    };
    let e_b0 = pick(EdgeLabel::Background);
    let e_r0 = pick(EdgeLabel::Reflection);
    let m_b0 = Mask::from_fn(h, w, |y, x| {
        (0..e_b0.channels()).any(|c| e_b0.get(c, y, x) > T::zero())
    });
    Ok(InitialEdges { e_b0, e_r0, m_b0 })
}

/// Labels and initial estimates for one reference image.
#[derive(Clone, Debug)]
pub struct EdgeSplit<T> {
    /// `None` when the depths were degenerate and every edge became shared.
    pub thresholds: Option<DepthThresholds>,
    pub labels: EdgeLayerLabels,
    pub initial: InitialEdges<T>,
}

/// Per-image three-way split of the reference edges `edges` using the
/// disparities of `depth` away from a `border`-pixel frame. Too few distinct
/// depths leave every valid edge shared.
pub fn split_edges<T: Scalar>(
    edges: &EdgeImage<T>,
    depth: &EdgeDepthMap<T>,
    bg_is_far: bool,
    border: usize,
) -> Result<EdgeSplit<T>> {
    let values: Vec<f64> = depth
        .edge_values(border)
        .iter()
        .map(|v| v.to_f64_lossy())
        .collect();
    let (thresholds, labels) = match kmeans_thresholds(&values) {
        Ok(t) => (Some(t), classify_edges(depth, t, bg_is_far)),
        Err(Error::DegenerateDepths { .. }) => {
            let (h, w) = depth.valid_mask.dims();
            let all = EdgeLayerLabels::from_fn(h, w, |y, x| {
                if depth.valid_mask.get(y, x) {
                    EdgeLabel::Shared
                } else {
                    EdgeLabel::None
                }
            });
            (None, all)
        }
        Err(e) => return Err(e),
    };
    let initial = initial_edge_estimates(edges, &labels)?;
    Ok(EdgeSplit {
        thresholds,
        labels,
        initial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn depth_map(values: &[f64], w: usize) -> EdgeDepthMap<f64> {
        let h = values.len() / w;
        EdgeDepthMap {
            values: Image::from_vec(1, h, w, values.to_vec()).unwrap(),
            valid_mask: Mask::ones(h, w),
        }
    }

    #[test]
    fn three_well_separated_groups() {
        let d = [1.0, 1.1, 0.9, 5.0, 5.1, 4.9, 9.0, 9.1, 8.9];
        let t = kmeans_thresholds(&d).unwrap();
        assert!((t.k1 - 3.0).abs() < 1e-9 && (t.k2 - 7.0).abs() < 1e-9, "{t:?}");
    }

    #[test]
    fn degenerate_inputs_are_reported() {
        assert!(matches!(
            kmeans_thresholds(&[2.0; 10]),
            Err(Error::DegenerateDepths { distinct: 1 })
        ));
        assert!(kmeans_thresholds(&[1.0, 2.0, 1.0]).is_err());
        assert!(kmeans_thresholds(&[1.0, 2.0, 3.0]).is_ok());
    }

    #[test]
    fn thresholds_follow_affine_maps() {
        let d: Vec<f64> = (0..40).map(|i| ((i * 37) % 23) as f64 * 0.3 + (i % 3) as f64 * 5.0).collect();
        let t = kmeans_thresholds(&d).unwrap();
        let mapped: Vec<f64> = d.iter().map(|v| 2.5 * v - 4.0).collect();
        let tm = kmeans_thresholds(&mapped).unwrap();
        assert!((tm.k1 - (2.5 * t.k1 - 4.0)).abs() < 1e-9);
        assert!((tm.k2 - (2.5 * t.k2 - 4.0)).abs() < 1e-9);
    }

    #[test]
    fn classification_by_definition() {
        let t = DepthThresholds::new(2.0, 6.0).unwrap();
        let map = depth_map(&[1.0, 4.0, 7.0], 3);
        let near_bg = classify_edges(&map, t, false);
        assert_eq!(
            near_bg.labels(),
            &[EdgeLabel::Reflection, EdgeLabel::Shared, EdgeLabel::Background]
        );
        let far_bg = classify_edges(&map, t, true);
        assert_eq!(
            far_bg.labels(),
            &[EdgeLabel::Background, EdgeLabel::Shared, EdgeLabel::Reflection]
        );
    }

    #[test]
    fn invalid_pixels_stay_unlabeled() {
        let mut map = depth_map(&[1.0, 4.0, 7.0, 9.0], 2);
        map.valid_mask.set(0, 1, false);
        let l = classify_edges(&map, DepthThresholds::new(2.0, 6.0).unwrap(), true);
        assert_eq!(l.get(0, 1), EdgeLabel::None);
        assert_eq!(l.count(EdgeLabel::None), 1);
        assert!(DepthThresholds::new(3.0, 3.0).is_err());
    }

    #[test]
    fn initial_estimates_partition_the_edges() {
        let edges = Image::from_fn(3, 2, 3, |c, y, x| (1 + c + y * 3 + x) as f64 * 0.1);
        let labels = EdgeLayerLabels::from_fn(2, 3, |y, x| match (y * 3 + x) % 3 {
            0 => EdgeLabel::Background,
            1 => EdgeLabel::Reflection,
            _ => EdgeLabel::Shared,
        });
        let init = initial_edge_estimates(&edges, &labels).unwrap();
        for i in 0..6 {
            let (y, x) = (i / 3, i % 3);
            let l = labels.get(y, x);
            for c in 0..3 {
                let (b, r) = (init.e_b0.get(c, y, x), init.e_r0.get(c, y, x));
                assert!(b == 0.0 || r == 0.0);
                match l {
                    EdgeLabel::Background => assert_eq!(b, edges.get(c, y, x)),
                    EdgeLabel::Reflection => assert_eq!(r, edges.get(c, y, x)),
                    _ => assert_eq!(b + r, 0.0),
                }
            }
        }
        assert_eq!(init.m_b0, labels.mask(EdgeLabel::Background));

        let all_shared = EdgeLayerLabels::from_fn(2, 3, |_, _| EdgeLabel::Shared);
        let init = initial_edge_estimates(&edges, &all_shared).unwrap();
        assert!(init.e_b0.data().iter().chain(init.e_r0.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_depths_make_every_edge_shared() {
        let map = depth_map(&[2.0; 6], 3);
        let edges = Image::filled(3, 2, 3, 0.5);
        let split = split_edges(&edges, &map, true, 0).unwrap();
        assert!(split.thresholds.is_none());
        assert_eq!(split.labels.count(EdgeLabel::Shared), 6);
        assert_eq!(split.initial.m_b0.count(), 0);
    }

    #[test]
    fn two_cluster_split_assigns_nearest_centroid() {
        let map = depth_map(&[1.0, 1.2, 0.8, 6.0, 6.2, 5.8], 6);
        let l = classify_two_clusters(&map, true, 0).unwrap();
        assert_eq!(l.count(EdgeLabel::Background), 3);
        assert_eq!(l.count(EdgeLabel::Reflection), 3);
        assert_eq!(l.count(EdgeLabel::Shared), 0);
        assert_eq!(l.get(0, 0), EdgeLabel::Background);
    }
}
