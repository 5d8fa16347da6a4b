use std::f64::consts::PI;

use super::AudioClip;
use crate::error::{Error, Result};

/// Zero crossings of the sinc kernel on each side, measured at the cutoff.
const ZERO_CROSSINGS: f64 = 16.0;
/// Passband edge relative to the lower Nyquist frequency.
const ROLLOFF: f64 = 0.95;

/// Band-limited resampling with a Hann-windowed sinc kernel.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if clip.samples.is_empty() {
        return Err(Error::invalid("cannot resample an empty clip"));
    }
    if target_rate == 0 || clip.sample_rate == 0 {
        return Err(Error::invalid("sample rates must be positive"));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src = clip.sample_rate as f64;
    let ratio = target_rate as f64 / src;
    let n_in = clip.samples.len();
    let n_out = (n_in as f64 * ratio).round() as usize;
    let cutoff = ROLLOFF * ratio.min(1.0);
    let half = (ZERO_CROSSINGS / cutoff).ceil();
    let x = &clip.samples;

    let mut out = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let pos = i as f64 / ratio;
        let lo = (pos - half).ceil().max(0.0) as usize;
        let hi = ((pos + half).floor() as usize).min(n_in - 1);
        let (mut acc, mut wsum) = (0.0f64, 0.0f64);
        for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let d = pos - k as f64;
            let w = kernel(d, cutoff, half);
            acc += w * xk as f64;
            wsum += w;
        }
        out.push(if wsum.abs() > 1e-12 { (acc / wsum) as f32 } else { 0.0 });
    }
    AudioClip::new(out, target_rate, clip.clip_id.clone())
}

fn kernel(d: f64, cutoff: f64, half: f64) -> f64 {
    if d.abs() >= half {
        return 0.0;
    }
    let arg = PI * cutoff * d;
    let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
    let window = 0.5 * (1.0 + (PI * d / half).cos());
    cutoff * sinc * window
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn peak_hz(x: &[f32], rate: f64) -> f64 {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        let half = buf.len() / 2;
        let k = (1..half)
            .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
            .unwrap();
        k as f64 * rate / x.len() as f64
    }

    #[test]
    fn identity_when_rates_match() {
        let c = AudioClip::new(vec![0.1, -0.2, 0.3], 16_000, "c").unwrap();
        assert_eq!(resample(&c, 16_000).unwrap(), c);
    }

    #[test]
    fn silence_maps_to_silence() {
        let c = AudioClip::new(vec![0.0; 441_000], 44_100, "z").unwrap();
        let r = resample(&c, 16_000).unwrap();
        assert_eq!(r.samples.len(), 160_000);
        assert!(r.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sine_keeps_its_frequency() {
        let n = 32_000;
        let x: Vec<f32> = (0..n)
            .map(|i| (2.0 * PI * 440.0 * i as f64 / 32_000.0).sin() as f32)
            .collect();
        let r = resample(&AudioClip::new(x, 32_000, "s").unwrap(), 16_000).unwrap();
        assert_eq!(r.samples.len(), 16_000);
        let bin = 16_000.0 / r.samples.len() as f64;
        assert!((peak_hz(&r.samples, 16_000.0) - 440.0).abs() <= bin);
    }

    #[test]
    fn duration_preserved_within_a_sample() {
        let c = AudioClip::new(vec![0.5; 22_051], 22_050, "d").unwrap();
        let r = resample(&c, 16_000).unwrap();
        assert!((r.duration() - c.duration()).abs() <= 1.0 / 16_000.0);
    }

    #[test]
    fn empty_clip_is_rejected() {
        let c = AudioClip::new(vec![], 16_000, "e").unwrap();
        assert!(resample(&c, 8_000).is_err());
    }
}
