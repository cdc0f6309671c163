//! Sobel edge extraction and the mask algebra shared by every stage.

use crate::error::{Error, Result};
use crate::image::{EdgeImage, GradientMap, Image, Mask};
use crate::scalar::Scalar;

/// Edge threshold used for every binary edge map.
pub const DEFAULT_SIGMA: f64 = 0.05;

/// Normalized Sobel magnitude of one plane, clamp-to-edge at the border.
/// The `1/4` factor makes a unit step respond with magnitude 1.
fn sobel_plane<T: Scalar>(src: &[T], h: usize, w: usize) -> Vec<T> {
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        src[yy * w + xx]
    };
    let two = T::lit(2.0);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + two * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + two * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + two * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + two * at(y - 1, x) + at(y - 1, x + 1));
            out.push((gx * gx + gy * gy).sqrt() * quarter);
        }
    }
    out
}

/// Scalar gradient magnitude of the luminance.
pub fn gradient_map<T: Scalar>(image: &Image<T>) -> GradientMap<T> {
    let lum = image.luminance();
    let (h, w) = lum.dims();
    Image::from_vec(1, h, w, sobel_plane(lum.plane(0), h, w)).expect("sobel keeps size")
}

/// Per-channel gradient magnitude.
pub fn edge_image<T: Scalar>(image: &Image<T>) -> EdgeImage<T> {
    let (h, w) = image.dims();
    let mut data = Vec::with_capacity(image.data().len());
    for c in 0..image.channels() {
        data.extend(sobel_plane(image.plane(c), h, w));
    }
    Image::from_vec(image.channels(), h, w, data).expect("sobel keeps size")
}

/// Pixels whose largest channel magnitude reaches `sigma`.
pub fn binarize_edges<T: Scalar>(edges: &EdgeImage<T>, sigma: f64) -> Result<Mask> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("edge threshold must be > 0, got {sigma}")));
    }
    let s = T::lit(sigma);
    let (h, w) = edges.dims();
    Ok(Mask::from_fn(h, w, |y, x| {
        (0..edges.channels()).any(|c| edges.get(c, y, x) >= s)
    }))
}

/// `max(m_e - m_b, 0)`: edges of the mixture not explained by the background.
pub fn residual_mask(m_e: &Mask, m_b: &Mask) -> Result<Mask> {
    m_e.and(&m_b.not())
}

/// Zeroes `image` wherever `mask` is 0.
pub fn keep_masked<T: Scalar>(image: &Image<T>, mask: &Mask) -> Result<Image<T>> {
    check_mask(image, mask)?;
    let (h, w) = image.dims();
    Ok(Image::from_fn(image.channels(), h, w, |c, y, x| {
        if mask.get(y, x) {
            image.get(c, y, x)
        } else {
            T::zero()
        }
    }))
}

/// Zeroes `image` wherever `mask` is 1.
pub fn remove_masked<T: Scalar>(image: &Image<T>, mask: &Mask) -> Result<Image<T>> {
    keep_masked(image, &mask.not())
}

/// `(I_c·(1 − m_r), I_c·m_b)`: the reference without reflection edges and the
/// reference restricted to background edges.
pub fn masked_inputs<T: Scalar>(
    reference: &Image<T>,
    m_b: &Mask,
    m_r: &Mask,
) -> Result<(Image<T>, Image<T>)> {
    Ok((remove_masked(reference, m_r)?, keep_masked(reference, m_b)?))
}

fn check_mask<T: Scalar>(image: &Image<T>, mask: &Mask) -> Result<()> {
    if image.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "image {:?} vs mask {:?}",
            image.dims(),
            mask.dims()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(h: usize, w: usize, at: usize) -> Image<f64> {
        Image::from_fn(3, h, w, |_, _, x| if x >= at { 1.0 } else { 0.0 })
    }

    #[test]
    fn constant_image_has_no_gradient() {
        let img = Image::filled(3, 8, 8, 0.3f64);
        assert!(gradient_map(&img).data().iter().all(|&v| v == 0.0));
        assert!(edge_image(&img).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_step_responds_with_magnitude_one() {
        // step between columns 3 and 4: both flanking columns see the full
        // kernel weight (1 + 2 + 1) / 4 = 1
        let g = gradient_map(&step(6, 8, 4));
        for y in 0..6 {
            for x in 0..8 {
                let want = if x == 3 || x == 4 { 1.0 } else { 0.0 };
                assert!((g.get(0, y, x) - want).abs() < 1e-12, "({y},{x})");
            }
        }
        let mask = binarize_edges(&edge_image(&step(6, 8, 4)), DEFAULT_SIGMA).unwrap();
        assert_eq!(mask, Mask::from_fn(6, 8, |_, x| x == 3 || x == 4));
    }

    #[test]
    fn rotation_commutes_with_gradient() {
        let img = Image::from_fn(3, 7, 9, |c, y, x| ((c + 2 * y + 3 * x * x) % 7) as f64 / 7.0);
        let a = gradient_map(&img.rotate90(1));
        let b = gradient_map(&img).rotate90(1);
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn single_channel_step_stays_in_its_channel() {
        let img = Image::from_fn(3, 5, 6, |c, _, x| if c == 1 && x >= 3 { 1.0 } else { 0.0 });
        let e = edge_image(&img);
        assert!(e.plane(0).iter().all(|&v| v == 0.0));
        assert!(e.plane(2).iter().all(|&v| v == 0.0));
        assert!(e.plane(1).iter().any(|&v| v > 0.0));
    }

    #[test]
    fn gray_input_gives_equal_channels() {
        let gray = Image::from_fn(1, 6, 6, |_, y, x| ((y * 3 + x) % 5) as f64 / 5.0).replicate(3);
        let e = edge_image(&gray);
        assert_eq!(e.plane(0), e.plane(1));
        assert_eq!(e.plane(1), e.plane(2));
    }

    #[test]
    fn threshold_edge_cases() {
        let zero = Image::<f64>::new(3, 4, 4);
        assert_eq!(binarize_edges(&zero, 0.05).unwrap().count(), 0);
        let e = edge_image(&step(6, 8, 4));
        assert_eq!(binarize_edges(&e, 1.5).unwrap().count(), 0);
        assert!(binarize_edges(&e, 0.0).is_err());
    }

    #[test]
    fn residual_mask_contract() {
        let m_e = Mask::from_fn(4, 4, |y, x| (y + x) % 2 == 0);
        assert_eq!(residual_mask(&m_e, &m_e).unwrap().count(), 0);
        assert_eq!(residual_mask(&m_e, &Mask::zeros(4, 4)).unwrap(), m_e);
        // m_b outside m_e clamps to 0 rather than going negative
        let r = residual_mask(&Mask::zeros(4, 4), &Mask::ones(4, 4)).unwrap();
        assert_eq!(r.count(), 0);
        assert!(residual_mask(&m_e, &Mask::zeros(3, 4)).is_err());
    }

    #[test]
    fn masked_inputs_contract() {
        let img = Image::from_fn(3, 4, 4, |c, y, x| (c * 16 + y * 4 + x) as f64 / 48.0 + 0.01);
        let (i_mr, _) = masked_inputs(&img, &Mask::zeros(4, 4), &Mask::zeros(4, 4)).unwrap();
        assert_eq!(i_mr, img);
        let (_, i_mb) = masked_inputs(&img, &Mask::ones(4, 4), &Mask::zeros(4, 4)).unwrap();
        assert_eq!(i_mb, img);

        // disjoint covering masks: brute-force per-pixel evaluation
        let m_b = Mask::from_fn(4, 4, |y, x| (y * 4 + x) % 3 == 0);
        let m_r = m_b.not();
        let (i_mr, i_mb) = masked_inputs(&img, &m_b, &m_r).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let v = img.get(c, y, x);
                    let (want_r, want_b) = if m_b.get(y, x) { (v, v) } else { (0.0, 0.0) };
                    assert_eq!(i_mr.get(c, y, x), want_r);
                    assert_eq!(i_mb.get(c, y, x), want_b);
                    assert_eq!(i_mr.get(c, y, x) + i_mb.get(c, y, x), 2.0 * want_b);
                }
            }
        }
        assert!(masked_inputs(&img, &Mask::zeros(3, 3), &m_r).is_err());
    }
}
