//! Tokenize a synthetic image into its scale pyramid and upsample each
//! coarse map back to full size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scaleflow::data::synth_sample;
use scaleflow::multiscale::{tokenize, upsample_bicubic};
use scaleflow::PyramidConfig;

fn main() -> scaleflow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = synth_sample(&mut rng, 3, 8, 3);
    let cfg = PyramidConfig::new(3, 2)?;
    let pyr = tokenize(&img, &cfg)?;
    for (i, m) in pyr.maps.iter().enumerate() {
        let r = cfg.factor(i);
        let up = upsample_bicubic(m, r)?;
        let rmse = (up.sub(&img)?.sum_squares() / img.data().len() as f64).sqrt();
        println!("scale {i}: {:?} tokens, factor {r}, upsampled rmse {rmse:.4}", (m.height(), m.width()));
    }
    Ok(())
}
