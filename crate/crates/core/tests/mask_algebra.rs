//! Randomized mask-algebra properties, 1000 cases each.

use proptest::prelude::*;
use refsep::classifier::{classify_edges, initial_edge_estimates, split_edges, DepthThresholds, EdgeLabel};
use refsep::depth::EdgeDepthMap;
use refsep::edge_ops::{binarize_edges, keep_masked, masked_inputs, remove_masked, residual_mask};
use refsep::{Image, Mask};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 1000,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..12, 1usize..12)
}

fn image(c: usize, h: usize, w: usize) -> impl Strategy<Value = Image<f64>> {
    prop::collection::vec(0.0f64..1.0, c * h * w).prop_map(move |v| Image::from_vec(c, h, w, v).unwrap())
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |b| Mask::from_bools(h, w, &b).unwrap())
}

fn edges_and_sigmas() -> impl Strategy<Value = (Image<f64>, f64, f64)> {
    dims().prop_flat_map(|(h, w)| (image(3, h, w), 0.001f64..1.0, 0.001f64..1.0))
}

fn image_and_masks() -> impl Strategy<Value = (Image<f64>, Mask, Mask)> {
    dims().prop_flat_map(|(h, w)| (image(3, h, w), mask(h, w), mask(h, w)))
}

fn depth_map() -> impl Strategy<Value = (EdgeDepthMap<f64>, Image<f64>, f64, f64, bool)> {
    dims().prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0.0f64..6.0, h * w),
            mask(h, w),
            image(3, h, w),
            0.0f64..6.0,
            0.0f64..6.0,
            any::<bool>(),
        )
            .prop_map(move |(d, valid, edges, a, b, far)| {
                let values = Image::from_vec(1, h, w, d).unwrap();
                let map = EdgeDepthMap { values, valid_mask: valid };
                (map, edges, a.min(b), a.max(b) + 1e-3, far)
            })
    })
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn thresholding_is_monotone((edges, a, b) in edges_and_sigmas()) {
        let (lo, hi) = (a.min(b), a.max(b));
        let strict = binarize_edges(&edges, hi).unwrap();
        let loose = binarize_edges(&edges, lo).unwrap();
        prop_assert!(strict.is_subset_of(&loose));
        let brighter = edges.map(|v| (v * 1.5).min(2.0));
        prop_assert!(loose.is_subset_of(&binarize_edges(&brighter, lo).unwrap()));
    }

    #[test]
    fn residual_mask_is_the_unexplained_part((_img, m_e, m_b) in image_and_masks()) {
        let r = residual_mask(&m_e, &m_b).unwrap();
        prop_assert!(r.is_subset_of(&m_e));
        prop_assert_eq!(r.and(&m_b).unwrap().count(), 0);
        prop_assert_eq!(r.or(&m_e.and(&m_b).unwrap()).unwrap(), m_e.clone());
        let superset = m_b.or(&m_e).unwrap();
        prop_assert_eq!(residual_mask(&m_e, &superset).unwrap().count(), 0);
    }

    #[test]
    fn masking_conserves_the_input((img, m_b, m_r) in image_and_masks()) {
        let kept = keep_masked(&img, &m_b).unwrap();
        let removed = remove_masked(&img, &m_b).unwrap();
        prop_assert_eq!(kept.zip_map(&removed, |a, b| a + b).unwrap(), img.clone());
        let (i_mr, i_mb) = masked_inputs(&img, &m_b, &m_r).unwrap();
        prop_assert_eq!(i_mb, kept);
        let (h, w) = img.dims();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let want = if m_r.get(y, x) { 0.0 } else { img.get(c, y, x) };
                    prop_assert_eq!(i_mr.get(c, y, x), want);
                }
            }
        }
    }

    #[test]
    fn labels_partition_the_edges((depth, edges, k1, k2, far) in depth_map()) {
        let labels = classify_edges(&depth, DepthThresholds::new(k1, k2).unwrap(), far);
        let parts = [EdgeLabel::Reflection, EdgeLabel::Shared, EdgeLabel::Background].map(|l| labels.mask(l));
        let mut union = Mask::zeros(depth.valid_mask.height(), depth.valid_mask.width());
        for (i, p) in parts.iter().enumerate() {
            for q in &parts[i + 1..] {
                prop_assert_eq!(p.and(q).unwrap().count(), 0);
            }
            union = union.or(p).unwrap();
        }
        prop_assert_eq!(&union, &depth.valid_mask);
        prop_assert_eq!(labels.mask(EdgeLabel::None), depth.valid_mask.not());

        let init = initial_edge_estimates(&edges, &labels).unwrap();
        prop_assert!(init.m_b0.is_subset_of(&parts[2]));
        let shared = keep_masked(&edges, &parts[1]).unwrap();
        let total = init.e_b0.zip_map(&init.e_r0, |a, b| a + b).unwrap().zip_map(&shared, |a, b| a + b).unwrap();
        prop_assert_eq!(total, keep_masked(&edges, &depth.valid_mask).unwrap());

        let split = split_edges(&edges, &depth, far, 0).unwrap();
        let (h, w) = depth.valid_mask.dims();
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(split.labels.get(y, x) != EdgeLabel::None, depth.valid_mask.get(y, x));
            }
        }
    }
}
