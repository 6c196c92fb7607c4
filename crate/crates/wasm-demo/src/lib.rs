//! Browser demo: scan-route visiting order, the impulse response of a
//! one-channel selective scan, and seeded noise with PSNR/SSIM.

use mtair::degrade::add_gaussian_noise;
use mtair::metrics::{psnr, ssim};
use mtair::ssm::{scan_forward, ScanDirection, ScanInputs};
use mtair::Tensor;
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn direction(name: &str) -> Result<ScanDirection, JsError> {
    ScanDirection::ALL
        .into_iter()
        .find(|d| d.name() == name)
        .ok_or_else(|| err(format!("unknown route {name:?}")))
}

/// Step at which each cell of an `h×w` grid is visited, in row-major cell order.
#[wasm_bindgen]
pub fn route_steps(route: &str, h: usize, w: usize) -> Result<Vec<u32>, JsError> {
    let order = direction(route)?.order(h, w);
    let mut steps = vec![0u32; h * w];
    for (t, &cell) in order.iter().enumerate() {
        steps[cell] = t as u32;
    }
    Ok(steps)
}

/// Output of a scan with one channel and one state, fed a unit impulse at
/// step 0 and constant step size, input/output gains and skip weight.
#[wasm_bindgen]
pub fn impulse_response(len: usize, delta: f64, a_log: f64, b: f64, c: f64, skip: f64) -> Result<Vec<f64>, JsError> {
    if len == 0 {
        return Err(err("length must be positive"));
    }
    let seq = |f: &dyn Fn(usize) -> f64| Tensor::from_fn([1, 1, len, 1], |[_, _, t, _]| f(t));
    let u = seq(&|t| if t == 0 { 1.0 } else { 0.0 });
    let (delta, bt, ct) = (seq(&|_| delta), seq(&|_| b), seq(&|_| c));
    let (a, d) = (Tensor::from_fn([1, 1, 1, 1], |_| a_log), Tensor::from_fn([1, 1, 1, 1], |_| skip));
    let inputs = ScanInputs {
        u: &u,
        delta: &delta,
        b: &bt,
        c: &ct,
        a_log: &a,
        d: &d,
    };
    let (y, _) = scan_forward(&inputs, false).map_err(err)?;
    Ok(y.data().to_vec())
}

fn rgba_to_tensor(rgba: &[u8], w: usize, h: usize) -> Result<Tensor<f32>, JsError> {
    if rgba.len() != w * h * 4 {
        return Err(err(format!("expected {} RGBA bytes, got {}", w * h * 4, rgba.len())));
    }
    Ok(Tensor::from_fn([1, h, w, 3], |[_, y, x, c]| rgba[(y * w + x) * 4 + c] as f32 / 255.0))
}

/// Adds Gaussian noise of level `sigma` (on the 0–255 scale) to an RGBA
/// image. Alpha is kept.
#[wasm_bindgen]
pub fn add_noise(rgba: &[u8], w: usize, h: usize, sigma: f64, seed: u64) -> Result<Vec<u8>, JsError> {
    let noisy = add_gaussian_noise(&rgba_to_tensor(rgba, w, h)?, sigma, seed).map_err(err)?;
    let mut out = rgba.to_vec();
    for (i, px) in out.chunks_exact_mut(4).enumerate() {
        for c in 0..3 {
            px[c] = (noisy.data()[i * 3 + c] * 255.0).round() as u8;
        }
    }
    Ok(out)
}

/// `[psnr_db, ssim]` of two RGBA images on the 8-bit scale.
#[wasm_bindgen]
pub fn quality(a: &[u8], b: &[u8], w: usize, h: usize) -> Result<Vec<f64>, JsError> {
    let (x, y) = (rgba_to_tensor(a, w, h)?, rgba_to_tensor(b, w, h)?);
    Ok(vec![psnr(&x, &y, 1.0).map_err(err)?, ssim(&x, &y, 1.0).map_err(err)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_follow_the_route() {
        // top-right route on 3×3 visits c f i b e h a d g
        let steps = route_steps("top_right", 3, 3).unwrap();
        assert_eq!(steps, [6, 3, 0, 7, 4, 1, 8, 5, 2]);
        assert_eq!(route_steps("top_left", 2, 3).unwrap(), [0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn impulse_decays_geometrically() {
        let (delta, a_log) = (0.5, 0.0);
        let y = impulse_response(6, delta, a_log, 1.0, 1.0, 0.0).unwrap();
        let decay = f64::exp(-delta * a_log.exp());
        for t in 1..y.len() {
            assert!((y[t] / y[t - 1] - decay).abs() < 1e-12, "{y:?}");
        }
    }

    #[test]
    fn identical_images_score_perfectly() {
        let img: Vec<u8> = (0..16 * 16 * 4).map(|i| (i * 7 % 251) as u8).collect();
        let q = quality(&img, &img, 16, 16).unwrap();
        assert!(q[0].is_infinite() && (q[1] - 1.0).abs() < 1e-12);
        let noisy = add_noise(&img, 16, 16, 25.0, 1).unwrap();
        assert_eq!(noisy, add_noise(&img, 16, 16, 25.0, 1).unwrap());
        assert!(noisy.chunks(4).zip(img.chunks(4)).all(|(a, b)| a[3] == b[3]));
        assert!(quality(&noisy, &img, 16, 16).unwrap()[0] < 40.0);
    }
}
