use super::{gen_video, Mask, SceneSpec};
use crate::error::{Error, Result};
use crate::tensor::VideoTensor;

/// Reported PSNR for identical signals.
pub const PSNR_CAP: f64 = 99.0;

fn masked_mse(a: &VideoTensor, b: &VideoTensor, mask: &Mask) -> Result<f64> {
    a.ensure_same_dims(b, "masked comparison")?;
    mask.check_video(a)?;
    let c = a.channels();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (p, &on) in mask.data().iter().enumerate() {
        if !on {
            continue;
        }
        for k in p * c..(p + 1) * c {
            let d = a.data()[k] as f64 - b.data()[k] as f64;
            sum += d * d;
        }
        count += c;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// `10 log10(1 / MSE)` over the masked pixels (all channels), for signals
/// in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr_masked(a: &VideoTensor, b: &VideoTensor, mask: &Mask) -> Result<f64> {
    let mse = masked_mse(a, b, mask)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// `1 - clamp(RMSE / 0.5, 0, 1)` between `edited` and the ground-truth
/// render of `target` over `mask`.
pub fn fulfillment_score(edited: &VideoTensor, target: &SceneSpec, mask: &Mask) -> Result<f64> {
    let truth = gen_video(target)?;
    let rmse = masked_mse(edited, &truth.video, mask)?.sqrt();
    Ok(1.0 - (rmse / 0.5).clamp(0.0, 1.0))
}
