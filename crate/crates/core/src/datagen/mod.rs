//! Parametric soundscape generator: ten synthetic event classes, additive
//! mixing over a noise background, and a DSP chain (reverb, EQ tilt,
//! recording noise) that turns clean renders into the "real" domain.

mod dataset;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::EventLabel;
use crate::dsp::{AudioClip, CLIP_SAMPLES, CLIP_SECONDS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::N_CLASSES;

pub use dataset::{
    build_dataset, check_disk_space, class_counts, extract_features, load_features, save_features, Dataset,
    DatasetConfig, DatasetManifest, LabelKind, SplitEntry,
};

/// How an event waveform is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SynthKind {
    /// Sine at a frequency drawn from the range.
    Tone,
    /// Linear sweep from the low end of the range to the high end; a range
    /// given high-to-low sweeps downwards.
    Chirp,
    /// White noise restricted to the frequency band.
    NoiseBurst,
    /// Sine carrier with sinusoidal amplitude modulation.
    AmTone { rate_hz: f64 },
    /// Fundamental plus `partials - 1` harmonics with 1/k amplitudes and an
    /// exponential decay of `decay` per second (0: sustained).
    Harmonic { partials: usize, decay: f64 },
}

/// Recipe for one event class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventTemplate {
    pub class_id: usize,
    pub kind: SynthKind,
    /// Seconds.
    pub duration: (f64, f64),
    /// Hz. For chirps, (start, end).
    pub freq: (f64, f64),
    /// Peak amplitude.
    pub amplitude: (f64, f64),
}

const FADE_S: f64 = 0.005;

impl EventTemplate {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("template for class {}: {m}", self.class_id)));
        if self.class_id >= N_CLASSES {
            return bad("class id out of range".into());
        }
        let (lo, hi) = self.duration;
        if !(lo > 0.1 && lo <= hi && hi < CLIP_SECONDS) {
            return bad(format!("duration range ({lo}, {hi}) must lie inside (0.1, 10) s"));
        }
        let nyq = SAMPLE_RATE as f64 / 2.0;
        let (f0, f1) = self.freq;
        if !(f0 > 0.0 && f1 > 0.0 && f0 < nyq && f1 < nyq) {
            return bad(format!("frequency range ({f0}, {f1}) must lie inside (0, {nyq}) Hz"));
        }
        if !matches!(self.kind, SynthKind::Chirp) && f0 > f1 {
            return bad("frequency range is reversed".into());
        }
        let (a0, a1) = self.amplitude;
        if !(0.0 <= a0 && a0 <= a1 && a1 <= 1.0) {
            return bad(format!("amplitude range ({a0}, {a1}) must lie inside [0, 1]"));
        }
        match self.kind {
            SynthKind::AmTone { rate_hz } if !(rate_hz > 0.0) => bad("modulation rate must be positive".into()),
            SynthKind::Harmonic { partials, decay } if partials == 0 || !(decay >= 0.0) => {
                bad("harmonic stack needs partials >= 1 and decay >= 0".into())
            }
            _ => Ok(()),
        }
    }
}

/// The ten event classes, in class-id order.
pub fn templates() -> [EventTemplate; N_CLASSES] {
    use SynthKind::*;
    let t = |class_id, kind, duration, freq, amplitude| EventTemplate {
        class_id,
        kind,
        duration,
        freq,
        amplitude,
    };
    [
        t(0, Tone, (0.3, 1.0), (900.0, 1100.0), (0.3, 0.8)),
        t(1, Tone, (0.5, 2.0), (2500.0, 3500.0), (0.2, 0.6)),
        t(2, AmTone { rate_hz: 3.0 }, (1.0, 3.0), (1400.0, 1800.0), (0.3, 0.8)),
        t(3, Chirp, (0.5, 1.5), (300.0, 3000.0), (0.3, 0.8)),
        t(4, Chirp, (0.5, 1.5), (3000.0, 300.0), (0.3, 0.8)),
        t(5, NoiseBurst, (0.5, 2.5), (4000.0, 7000.0), (0.2, 0.6)),
        t(6, NoiseBurst, (1.0, 3.0), (60.0, 300.0), (0.3, 0.8)),
        t(7, Harmonic { partials: 10, decay: 0.0 }, (1.0, 2.5), (100.0, 160.0), (0.3, 0.7)),
        t(8, Harmonic { partials: 3, decay: 0.0 }, (1.5, 4.0), (200.0, 260.0), (0.3, 0.7)),
        t(9, Harmonic { partials: 4, decay: 3.0 }, (0.5, 1.5), (500.0, 700.0), (0.3, 0.8)),
    ]
}

/// A rendered event before placement.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSegment {
    pub samples: Vec<f32>,
    /// Exact length in seconds (`samples.len() / SAMPLE_RATE`).
    pub duration: f64,
}

fn draw<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// White noise limited to `[lo, hi]` Hz by zeroing FFT bins.
fn band_noise<R: Rng + ?Sized>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let sr = SAMPLE_RATE as f64;
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sr / n as f64;
        if f < lo || f > hi {
            *v = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Renders one event at 16 kHz. The waveform is scaled so its peak equals
/// the drawn amplitude.
pub fn synth_event<R: Rng + ?Sized>(template: &EventTemplate, rng: &mut R) -> Result<EventSegment> {
    template.validate()?;
    let sr = SAMPLE_RATE as f64;
    let dur = draw(rng, template.duration);
    let n = ((dur * sr).round() as usize).max(1);
    let amp = draw(rng, template.amplitude);
    let t = |i: usize| i as f64 / sr;
    let mut x: Vec<f64> = match template.kind {
        SynthKind::Tone => {
            let f = draw(rng, template.freq);
            (0..n).map(|i| (2.0 * PI * f * t(i)).sin()).collect()
        }
        SynthKind::Chirp => {
            let (f0, f1) = template.freq;
            let len = n as f64 / sr;
            let k = (f1 - f0) / len;
            (0..n).map(|i| (2.0 * PI * (f0 * t(i) + 0.5 * k * t(i) * t(i))).sin()).collect()
        }
        SynthKind::NoiseBurst => band_noise(rng, n, template.freq.0, template.freq.1),
        SynthKind::AmTone { rate_hz } => {
            let f = draw(rng, template.freq);
            (0..n)
                .map(|i| (0.6 + 0.4 * (2.0 * PI * rate_hz * t(i)).sin()) * (2.0 * PI * f * t(i)).sin())
                .collect()
        }
        SynthKind::Harmonic { partials, decay } => {
            let f = draw(rng, template.freq);
            let nyq = sr / 2.0;
            (0..n)
                .map(|i| {
                    let s: f64 = (1..=partials)
                        .filter(|&k| k as f64 * f < nyq)
                        .map(|k| (2.0 * PI * k as f64 * f * t(i)).sin() / k as f64)
                        .sum();
                    s * (-decay * t(i)).exp()
                })
                .collect()
        }
    };
    let fade = ((FADE_S * sr) as usize).min(n / 2);
    for i in 0..fade {
        let g = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
        x[i] *= g;
        x[n - 1 - i] *= g;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { amp / peak } else { 0.0 };
    Ok(EventSegment {
        samples: x.iter().map(|v| (v * scale) as f32).collect(),
        duration: n as f64 / sr,
    })
}

/// Peak-normalises in place when the peak exceeds 1.
fn limit_peak(x: &mut [f32]) {
    let peak = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        for v in x.iter_mut() {
            *v /= peak;
        }
    }
}

/// Mixes the events at their onsets (seconds) over white noise of RMS
/// `background_level`. Events crossing the clip end are cut there and
/// their labels end at 10 s. The mix is scaled down when its peak exceeds 1.
pub fn render_soundscape<R: Rng + ?Sized>(
    events: &[(EventTemplate, f64)],
    background_level: f64,
    rng: &mut R,
    clip_id: &str,
) -> Result<(AudioClip, Vec<EventLabel>)> {
    if events.is_empty() {
        return Err(Error::invalid("a soundscape needs at least one event"));
    }
    if !(background_level >= 0.0) {
        return Err(Error::invalid(format!("background level {background_level} must be >= 0")));
    }
    let sr = SAMPLE_RATE as f64;
    let mut mix = vec![0.0f32; CLIP_SAMPLES];
    let mut labels = Vec::with_capacity(events.len());
    for (tpl, onset) in events {
        if !(0.0..CLIP_SECONDS).contains(onset) {
            return Err(Error::invalid(format!("onset {onset} outside the clip")));
        }
        let seg = synth_event(tpl, rng)?;
        let start = (onset * sr).round() as usize;
        let end = (start + seg.samples.len()).min(CLIP_SAMPLES);
        for (m, s) in mix[start..end].iter_mut().zip(&seg.samples) {
            *m += s;
        }
        labels.push(EventLabel::new(tpl.class_id, start as f64 / sr, end as f64 / sr)?);
    }
    if background_level > 0.0 {
        for m in mix.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *m += (z * background_level) as f32;
        }
    }
    limit_peak(&mut mix);
    Ok((AudioClip::new(mix, SAMPLE_RATE, clip_id)?, labels))
}

/// Settings of the clean-to-real transform chain. `None` disables a stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    /// Range of the room impulse response length in seconds.
    pub reverb_s: Option<(f64, f64)>,
    /// Largest absolute EQ tilt in dB between 0 Hz and Nyquist.
    pub tilt_db: f64,
    /// Range of the recording-noise SNR in dB.
    pub snr_db: Option<(f64, f64)>,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            reverb_s: Some((0.2, 0.5)),
            tilt_db: 6.0,
            snr_db: Some((20.0, 30.0)),
        }
    }
}

impl DomainShift {
    /// A chain that leaves clips untouched.
    pub fn identity() -> Self {
        Self {
            reverb_s: None,
            tilt_db: 0.0,
            snr_db: None,
        }
    }
}

/// Exponentially decaying noise reaching -60 dB at `len_s`, with a unit
/// direct path, scaled to unit energy.
pub fn room_impulse<R: Rng + ?Sized>(len_s: f64, rng: &mut R) -> Vec<f32> {
    let n = ((len_s * SAMPLE_RATE as f64).round() as usize).max(1);
    let mut h: Vec<f64> = (0..n)
        .map(|k| {
            if k == 0 {
                1.0
            } else {
                let z: f64 = StandardNormal.sample(rng);
                0.3 * z * (-6.9078 * k as f64 / n as f64).exp()
            }
        })
        .collect();
    let e = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    h.iter_mut().for_each(|v| *v /= e);
    h.into_iter().map(|v| v as f32).collect()
}

fn spectral_filter(x: &[f32], h: Option<&[f32]>, gain: impl Fn(f64) -> f64) -> Vec<f32> {
    let hl = h.map_or(1, |h| h.len());
    let n = (x.len() + hl - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let pad = |v: &[f32]| {
        let mut b: Vec<Complex<f64>> = v.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
        b.resize(n, Complex::new(0.0, 0.0));
        b
    };
    let mut xs = pad(x);
    fwd.process(&mut xs);
    if let Some(h) = h {
        let mut hs = pad(h);
        fwd.process(&mut hs);
        xs.iter_mut().zip(&hs).for_each(|(a, b)| *a *= b);
    }
    for (k, v) in xs.iter_mut().enumerate() {
        // symmetric in k so the result stays real
        *v *= gain(k.min(n - k) as f64 / (n / 2) as f64);
    }
    planner.plan_fft_inverse(n).process(&mut xs);
    xs[..x.len() + hl - 1].iter().map(|c| (c.re / n as f64) as f32).collect()
}

/// Linear convolution through the FFT; the output has `x + h - 1` samples.
pub fn fft_convolve(x: &[f32], h: &[f32]) -> Vec<f32> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    spectral_filter(x, Some(h), |_| 1.0)
}

/// Applies reverb, EQ tilt and recording noise, keeping the clip length.
pub fn domainify<R: Rng + ?Sized>(clip: &AudioClip, shift: &DomainShift, rng: &mut R) -> Result<AudioClip> {
    let mut y = clip.samples.clone();
    let rir = shift.reverb_s.map(|r| room_impulse(draw(rng, r), rng));
    let tilt = if shift.tilt_db > 0.0 {
        rng.random_range(-shift.tilt_db..shift.tilt_db)
    } else {
        0.0
    };
    if rir.is_some() || tilt != 0.0 {
        // gain in dB rises linearly from -tilt/2 at DC to +tilt/2 at Nyquist
        let g = |f: f64| 10f64.powf(tilt * (f - 0.5) / 20.0);
        y = spectral_filter(&y, rir.as_deref(), g);
        y.truncate(clip.samples.len());
    }
    if let Some(snr) = shift.snr_db {
        let snr = draw(rng, snr);
        let p = y.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / y.len().max(1) as f64;
        let sigma = (p / 10f64.powf(snr / 10.0)).sqrt();
        for v in y.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += (z * sigma) as f32;
        }
    }
    limit_peak(&mut y);
    AudioClip::new(y, clip.sample_rate, clip.clip_id.clone())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn fixed_tone(f: f64, d: f64, a: f64) -> EventTemplate {
        EventTemplate {
            class_id: 0,
            kind: SynthKind::Tone,
            duration: (d, d),
            freq: (f, f),
            amplitude: (a, a),
        }
    }

    fn peak_bin(x: &[f32]) -> f64 {
        let n = x.len();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let k = (0..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
        k as f64 * SAMPLE_RATE as f64 / n as f64
    }

    #[test]
    fn templates_are_valid_and_distinct() {
        let t = templates();
        for (i, tpl) in t.iter().enumerate() {
            assert_eq!(tpl.class_id, i);
            tpl.validate().unwrap();
        }
    }

    #[test]
    fn one_second_tone_peaks_at_its_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seg = synth_event(&fixed_tone(1000.0, 1.0, 0.5), &mut rng).unwrap();
        assert_eq!(seg.samples.len(), 16_000);
        assert_eq!(seg.duration, 1.0);
        assert_eq!(peak_bin(&seg.samples), 1000.0);
        let peak = seg.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((peak - 0.5).abs() < 1e-6);
    }

    #[test]
    fn zero_amplitude_gives_silence() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seg = synth_event(&fixed_tone(500.0, 0.5, 0.0), &mut rng).unwrap();
        assert!(seg.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_class_is_deterministic_and_bounded() {
        for tpl in templates() {
            let a = synth_event(&tpl, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let b = synth_event(&tpl, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            assert_eq!(a, b);
            assert!(a.samples.iter().all(|v| v.abs() <= 1.0));
            assert!(a.duration >= tpl.duration.0 - 1e-4 && a.duration <= tpl.duration.1 + 1e-4);
        }
    }

    #[test]
    fn chirps_sweep_in_their_direction() {
        let t = templates();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (tpl, rising) in [(t[3], true), (t[4], false)] {
            let s = synth_event(&tpl, &mut rng).unwrap().samples;
            let q = s.len() / 4;
            let early = peak_bin(&s[..q]);
            let late = peak_bin(&s[s.len() - q..]);
            assert_eq!(late > early, rising, "{early} -> {late}");
        }
    }

    #[test]
    fn noise_burst_stays_in_band() {
        let t = templates()[5];
        let s = synth_event(&t, &mut ChaCha8Rng::seed_from_u64(2)).unwrap().samples;
        let f = peak_bin(&s);
        assert!((3900.0..=7100.0).contains(&f), "{f}");
    }

    #[test]
    fn bad_templates_are_rejected() {
        let mut t = fixed_tone(1000.0, 1.0, 0.5);
        t.duration = (0.05, 1.0);
        assert!(t.validate().is_err());
        let mut t = fixed_tone(1000.0, 1.0, 0.5);
        t.freq = (9000.0, 9000.0);
        assert!(t.validate().is_err());
        let mut t = fixed_tone(1000.0, 1.0, 0.5);
        t.amplitude = (0.5, 1.5);
        assert!(t.validate().is_err());
    }

    #[test]
    fn soundscape_needs_an_event() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(render_soundscape(&[], 0.01, &mut rng, "x").is_err());
    }

    #[test]
    fn single_event_label_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (clip, labels) = render_soundscape(&[(fixed_tone(440.0, 1.0, 0.5), 2.0)], 0.01, &mut rng, "x").unwrap();
        assert_eq!(clip.samples.len(), CLIP_SAMPLES);
        assert_eq!(labels, vec![EventLabel::new(0, 2.0, 3.0).unwrap()]);
    }

    #[test]
    fn events_crossing_the_end_are_cut() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, labels) = render_soundscape(&[(fixed_tone(440.0, 2.0, 0.5), 9.0)], 0.0, &mut rng, "x").unwrap();
        assert_eq!(labels[0].offset, 10.0);
    }

    #[test]
    fn overlapping_events_add() {
        let a = fixed_tone(440.0, 2.0, 0.3);
        let b = templates()[5];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (clip, labels) = render_soundscape(&[(a, 1.0), (b, 1.5)], 0.0, &mut rng, "x").unwrap();
        assert_eq!(labels.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sa = synth_event(&a, &mut rng).unwrap().samples;
        let sb = synth_event(&b, &mut rng).unwrap().samples;
        let mut expected = vec![0.0f32; CLIP_SAMPLES];
        for (i, v) in sa.iter().enumerate() {
            expected[16_000 + i] += v;
        }
        for (i, v) in sb.iter().enumerate() {
            expected[24_000 + i] += v;
        }
        assert!(expected.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(clip.samples, expected);
    }

    #[test]
    fn loud_mixes_are_limited() {
        let a = fixed_tone(440.0, 2.0, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (clip, _) = render_soundscape(&[(a, 1.0), (a, 1.0)], 0.0, &mut rng, "x").unwrap();
        let peak = clip.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 1e-6);
    }

    #[test]
    fn labelled_intervals_carry_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for tpl in templates() {
            let (clip, labels) = render_soundscape(&[(tpl, 5.0)], 0.01, &mut rng, "x").unwrap();
            let e = |a: f64, b: f64| -> f64 {
                clip.samples[(a * 16_000.0) as usize..(b * 16_000.0) as usize]
                    .iter()
                    .map(|v| (*v as f64).powi(2))
                    .sum()
            };
            let l = labels[0];
            assert!(e(l.onset, l.offset) > e(0.0, l.duration()), "class {}", tpl.class_id);
        }
    }

    #[test]
    fn identity_shift_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (clip, _) = render_soundscape(&[(templates()[2], 1.0)], 0.01, &mut rng, "x").unwrap();
        let out = domainify(&clip, &DomainShift::identity(), &mut rng).unwrap();
        assert_eq!(out, clip);
    }

    #[test]
    fn impulse_reproduces_the_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = room_impulse(0.3, &mut rng);
        let mut x = vec![0.0f32; 100];
        x[0] = 1.0;
        let y = fft_convolve(&x, &h);
        assert_eq!(y.len(), 100 + h.len() - 1);
        for (a, b) in y.iter().zip(&h) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(y[h.len()..].iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let x = [1.0f32, -2.0, 0.5, 3.0];
        let h = [0.5f32, 0.25, -1.0];
        let y = fft_convolve(&x, &h);
        for (n, v) in y.iter().enumerate() {
            let d: f32 = (0..h.len()).filter(|&k| k <= n && n - k < x.len()).map(|k| h[k] * x[n - k]).sum();
            assert!((v - d).abs() < 1e-5);
        }
    }

    #[test]
    fn room_impulse_decays() {
        let h = room_impulse(0.4, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(h.len(), 6400);
        let e: f32 = h.iter().map(|v| v * v).sum();
        assert!((e - 1.0).abs() < 1e-4);
        let energy = |r: std::ops::Range<usize>| h[r].iter().map(|v| v * v).sum::<f32>();
        assert!(energy(1..1000) > 10.0 * energy(5400..6400));
    }

    #[test]
    fn domain_shift_is_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (clip, _) = render_soundscape(&[(templates()[0], 1.0)], 0.01, &mut rng, "x").unwrap();
        let a = domainify(&clip, &DomainShift::default(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = domainify(&clip, &DomainShift::default(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), clip.samples.len());
        assert!(a.samples.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a.samples, clip.samples);
    }

    #[test]
    fn noise_only_shift_hits_the_snr() {
        let clip = AudioClip::new(
            (0..CLIP_SAMPLES).map(|i| (i as f32 * 0.05).sin() * 0.5).collect(),
            SAMPLE_RATE,
            "x",
        )
        .unwrap();
        let shift = DomainShift {
            reverb_s: None,
            tilt_db: 0.0,
            snr_db: Some((20.0, 20.0)),
        };
        let out = domainify(&clip, &shift, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>();
        let noise: Vec<f32> = out.samples.iter().zip(&clip.samples).map(|(a, b)| a - b).collect();
        let snr = 10.0 * (p(&clip.samples) / p(&noise)).log10();
        assert!((snr - 20.0).abs() < 0.2, "{snr}");
    }
}
