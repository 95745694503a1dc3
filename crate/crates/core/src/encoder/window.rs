//! Non-overlapping window partitioning of `(B, C, H, W)` feature maps.
//!
//! Windows are emitted batch-major, then row-major over the window grid, as
//! `(B·N_w, wh·ww, C)` token blocks whose tokens are row-major inside the
//! window.

use candle_core::Tensor;

use crate::error::{Error, Result};

fn check(h: usize, w: usize, wh: usize, ww: usize) -> Result<()> {
    if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 {
        return Err(Error::invalid(format!(
            "feature map {h}x{w} is not divisible into {wh}x{ww} windows"
        )));
    }
    Ok(())
}

pub fn partition_windows(x: &Tensor, wh: usize, ww: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    check(h, w, wh, ww)?;
    let (nh, nw) = (h / wh, w / ww);
    let t = x
        .reshape(vec![b, c, nh, wh, nw, ww])?
        .permute(vec![0, 2, 4, 3, 5, 1])?
        .contiguous()?
        .reshape((b * nh * nw, wh * ww, c))?;
    Ok(t)
}

/// Inverse of [`partition_windows`] for a map of size `h × w`.
pub fn merge_windows(windows: &Tensor, h: usize, w: usize, wh: usize, ww: usize) -> Result<Tensor> {
    check(h, w, wh, ww)?;
    let (n, t, c) = windows.dims3()?;
    let (nh, nw) = (h / wh, w / ww);
    if t != wh * ww || n % (nh * nw) != 0 {
        return Err(Error::invalid(format!(
            "{n} windows of {t} tokens do not tile a {h}x{w} map with {wh}x{ww} windows"
        )));
    }
    let b = n / (nh * nw);
    let x = windows
        .reshape(vec![b, nh, nw, wh, ww, c])?
        .permute(vec![0, 5, 1, 3, 2, 4])?
        .contiguous()?
        .reshape((b, c, h, w))?;
    Ok(x)
}

pub fn num_windows(h: usize, w: usize, wh: usize, ww: usize) -> Result<usize> {
    check(h, w, wh, ww)?;
    Ok((h / wh) * (w / ww))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn ramp(b: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::arange(0f32, (b * c * h * w) as f32, &Device::Cpu)
            .unwrap()
            .reshape((b, c, h, w))
            .unwrap()
    }

    #[test]
    fn window_count_and_layout() {
        let x = ramp(1, 2, 64, 64);
        let win = partition_windows(&x, 8, 8).unwrap();
        assert_eq!(win.dims(), &[64, 64, 2]);
        // Window (0, 0) holds rows 0..8 and columns 0..8 of the map.
        let first = win.get(0).unwrap().to_vec2::<f32>().unwrap();
        for (t, tok) in first.iter().enumerate() {
            let (r, col) = (t / 8, t % 8);
            assert_eq!(tok[0], (r * 64 + col) as f32);
            assert_eq!(tok[1], (64 * 64 + r * 64 + col) as f32);
        }
        // Window 1 is the next window to the right.
        let second = win.get(1).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(second[0][0], 8.0);
    }

    #[test]
    fn indivisible_is_rejected() {
        let x = ramp(1, 1, 12, 16);
        assert!(partition_windows(&x, 8, 8).is_err());
        assert!(merge_windows(&Tensor::zeros((2, 64, 1), DType::F32, &Device::Cpu).unwrap(), 12, 16, 8, 8).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn merge_inverts_partition(b in 1usize..3, c in 1usize..5, nh in 1usize..4, nw in 1usize..4, ws in 1usize..5) {
            let (h, w) = (nh * ws, nw * ws);
            let x = ramp(b, c, h, w);
            let win = partition_windows(&x, ws, ws).unwrap();
            prop_assert_eq!(win.dim(0).unwrap(), b * nh * nw);
            let back = merge_windows(&win, h, w, ws, ws).unwrap();
            let diff = (back - &x).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            prop_assert_eq!(diff, 0.0);
        }
    }
}
