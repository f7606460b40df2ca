use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Example, Split};
use crate::audio::{AudioClip, TRAINING_SAMPLE_RATE};
use crate::encoders::IdentityLabel;
use crate::error::{Error, Result};
use crate::mesh::{MeshTopology, MotionSequence, Template};

/// Planted speaking-style factors of one synthetic speaker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStyleSpec {
    pub style_id: usize,
    /// Scale of every articulatory displacement.
    pub mouth_amplitude: f64,
    /// Constant lip offset along the outward (z) axis, in millimetres.
    pub lip_protrusion: f64,
    /// Exponential smoothing constant in (0, 1]; 1 means no smoothing.
    pub articulation_sharpness: f64,
}

const PROTRUSION: [f64; 8] = [-1.5, 1.0, -0.5, 2.0, 0.0, -2.0, 1.5, 0.5];
const SHARPNESS: [f64; 8] = [0.35, 0.9, 0.6, 0.45, 1.0, 0.7, 0.5, 0.8];

impl SyntheticStyleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mouth_amplitude > 0.0 && self.mouth_amplitude.is_finite()) {
            return Err(Error::Config(format!(
                "mouth_amplitude must be positive, got {}",
                self.mouth_amplitude
            )));
        }
        if !(self.articulation_sharpness > 0.0 && self.articulation_sharpness <= 1.0) {
            return Err(Error::Config(format!(
                "articulation_sharpness must lie in (0, 1], got {}",
                self.articulation_sharpness
            )));
        }
        if !self.lip_protrusion.is_finite() {
            return Err(Error::Config("lip_protrusion must be finite".into()));
        }
        Ok(())
    }

    /// The style planted for speaker `style_id` in generated corpora.
    pub fn planted(style_id: usize) -> Self {
        let cycle = (style_id / 8) as f64;
        Self {
            style_id,
            mouth_amplitude: 0.6 + 0.2 * (style_id % 8) as f64 + 0.05 * cycle,
            lip_protrusion: PROTRUSION[style_id % 8],
            articulation_sharpness: SHARPNESS[style_id % 8],
        }
    }

    /// Fundamental frequency of the speaker's voice in Hz.
    pub fn pitch(&self) -> f64 {
        95.0 + 18.0 * (self.style_id % 8) as f64 + 7.0 * (self.style_id / 8) as f64
    }
}

/// A pseudo-phoneme with formant pair and articulatory targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phoneme {
    pub name: &'static str,
    pub formants: (f64, f64),
    /// Mouth opening target in [0, 1].
    pub opening: f64,
    /// Lip spreading (+) or rounding (-) target in [-1, 1].
    pub spread: f64,
    pub loudness: f64,
    pub frication: f64,
}

const fn ph(name: &'static str, f1: f64, f2: f64, opening: f64, spread: f64, loudness: f64, frication: f64) -> Phoneme {
    Phoneme {
        name,
        formants: (f1, f2),
        opening,
        spread,
        loudness,
        frication,
    }
}

/// Inventory of twelve units; the first is the fully open vowel.
pub const PHONEMES: [Phoneme; 12] = [
    ph("aa", 750.0, 1200.0, 1.0, 0.2, 1.0, 0.0),
    ph("ae", 660.0, 1700.0, 0.8, 0.5, 0.9, 0.0),
    ph("eh", 530.0, 1850.0, 0.6, 0.6, 0.8, 0.0),
    ph("iy", 280.0, 2250.0, 0.25, 0.9, 0.7, 0.0),
    ph("ih", 400.0, 2000.0, 0.35, 0.7, 0.7, 0.0),
    ph("uw", 310.0, 870.0, 0.3, -0.9, 0.7, 0.0),
    ph("ow", 500.0, 900.0, 0.55, -0.7, 0.8, 0.0),
    ph("ah", 640.0, 1190.0, 0.7, 0.1, 0.9, 0.0),
    ph("m", 250.0, 1000.0, 0.0, 0.0, 0.35, 0.0),
    ph("b", 300.0, 1100.0, 0.05, 0.0, 0.2, 0.0),
    ph("f", 400.0, 1600.0, 0.1, 0.3, 0.15, 0.8),
    ph("s", 350.0, 1800.0, 0.15, 0.5, 0.15, 1.0),
];

/// Phoneme index per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeTrack {
    pub frames: Vec<usize>,
    pub fps: f32,
}

impl PhonemeTrack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame-wise (opening, spread) targets before smoothing.
    pub fn targets(&self) -> Vec<(f64, f64)> {
        self.frames
            .iter()
            .map(|&p| (PHONEMES[p].opening, PHONEMES[p].spread))
            .collect()
    }
}

/// Draws a phoneme sequence of `frames` frames from `content_seed`. Units
/// last 0.12 to 0.28 s, and one fully open vowel is held for up to 8 frames.
pub fn phoneme_track(content_seed: u64, frames: usize, fps: f32) -> PhonemeTrack {
    let mut rng = ChaCha8Rng::seed_from_u64(content_seed);
    let mut track = Vec::with_capacity(frames);
    while track.len() < frames {
        let p = rng.gen_range(0..PHONEMES.len());
        let secs: f64 = rng.gen_range(0.12..0.28);
        let len = ((secs * fps as f64).round() as usize).max(1);
        track.extend(std::iter::repeat(p).take(len));
    }
    track.truncate(frames);
    let hold = frames.min(8);
    let start = rng.gen_range(0..=frames - hold);
    for slot in &mut track[start..start + hold] {
        *slot = 0;
    }
    PhonemeTrack { frames: track, fps }
}

/// A rectangular grid face with lips, jaw and brow regions.
#[derive(Debug, Clone)]
pub struct SyntheticFace {
    rows: usize,
    cols: usize,
    topology: MeshTopology,
    upper_lip: Vec<usize>,
    lower_lip: Vec<usize>,
    jaw: Vec<usize>,
    brow: Vec<usize>,
}

const SPACING_MM: f64 = 8.0;
const OPENING_MM: f64 = 6.0;
const SPREAD_MM: f64 = 1.5;

impl SyntheticFace {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows < 6 || cols < 4 {
            return Err(Error::Config("synthetic face needs at least 6 rows and 4 columns".into()));
        }
        let at = |r: usize, c: usize| (r * cols + c) as u32;
        let mut faces = Vec::new();
        for r in 0..rows - 1 {
            for c in 0..cols - 1 {
                faces.push([at(r, c), at(r, c + 1), at(r + 1, c)]);
                faces.push([at(r, c + 1), at(r + 1, c + 1), at(r + 1, c)]);
            }
        }
        let lip_cols = cols / 4..cols - cols / 4;
        let row = |r: usize, cs: std::ops::Range<usize>| cs.map(|c| r * cols + c).collect::<Vec<_>>();
        let upper_lip = row(rows - 3, lip_cols.clone());
        let lower_lip = row(rows - 2, lip_cols);
        let jaw = row(rows - 1, 0..cols);
        let brow: Vec<usize> = (0..=(rows - 1) / 3).flat_map(|r| row(r, 0..cols)).collect();
        let lips: Vec<usize> = upper_lip.iter().chain(&lower_lip).copied().collect();
        let topology = MeshTopology::from_faces(rows * cols, faces, &lips, &brow)?;
        Ok(Self {
            rows,
            cols,
            topology,
            upper_lip,
            lower_lip,
            jaw,
            brow,
        })
    }

    pub fn topology(&self) -> &MeshTopology {
        &self.topology
    }

    pub fn vertex_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn upper_lip(&self) -> &[usize] {
        &self.upper_lip
    }

    pub fn lower_lip(&self) -> &[usize] {
        &self.lower_lip
    }

    fn column_offset(&self, v: usize) -> f64 {
        let half = (self.cols - 1) as f64 / 2.0;
        ((v % self.cols) as f64 - half) / half
    }

    /// Neutral face of a speaker: a shallow dome whose depth varies with
    /// the identity.
    pub fn template(&self, identity: usize) -> Result<Template> {
        let depth = 1.0 + 0.05 * (identity % 5) as f64;
        let mut v = Vec::with_capacity(self.vertex_count() * 3);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let x = (c as f64 - (self.cols - 1) as f64 / 2.0) * SPACING_MM;
                let y = ((self.rows - 1) as f64 / 2.0 - r as f64) * SPACING_MM;
                let z = depth * (30.0 - 0.01 * (x * x + y * y));
                v.extend([x as f32, y as f32, z as f32]);
            }
        }
        Template::new(v)
    }

    /// Per-frame displacements `[T][N_v * 3]` in millimetres for articulatory
    /// targets, smoothed when `smooth` is set.
    pub fn displacements(&self, targets: &[(f64, f64)], style: &SyntheticStyleSpec, smooth: bool) -> Vec<Vec<f64>> {
        let a = if smooth { style.articulation_sharpness } else { 1.0 };
        let mut state = targets.first().copied().unwrap_or((0.0, 0.0));
        let amp = style.mouth_amplitude;
        targets
            .iter()
            .map(|&(open, spread)| {
                state.0 += a * (open - state.0);
                state.1 += a * (spread - state.1);
                let (open, spread) = state;
                let mut d = vec![0.0; self.vertex_count() * 3];
                for (set, lift) in [(&self.upper_lip, 0.35), (&self.lower_lip, -0.65)] {
                    for &v in set {
                        let off = self.column_offset(v);
                        let falloff = 1.0 - 0.3 * off.abs();
                        d[v * 3] += off.signum() * off.abs() * spread * SPREAD_MM * amp;
                        d[v * 3 + 1] += lift * open * amp * OPENING_MM * falloff;
                        d[v * 3 + 2] += style.lip_protrusion;
                    }
                }
                for &v in &self.jaw {
                    let off = self.column_offset(v);
                    d[v * 3 + 1] -= 0.5 * open * amp * OPENING_MM * (1.0 - 0.5 * off.abs());
                }
                for &v in &self.brow {
                    d[v * 3 + 1] += 0.12 * open * amp * OPENING_MM;
                }
                d
            })
            .collect()
    }

    /// Largest vertical gap increase between the lips over a sequence of
    /// displacements.
    pub fn peak_opening(&self, displacements: &[Vec<f64>]) -> f64 {
        let mean_y = |d: &[f64], set: &[usize]| set.iter().map(|&v| d[v * 3 + 1]).sum::<f64>() / set.len() as f64;
        displacements
            .iter()
            .map(|d| mean_y(d, &self.upper_lip) - mean_y(d, &self.lower_lip))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Same as [`Self::peak_opening`] measured on a vertex sequence.
    pub fn peak_opening_of(&self, seq: &MotionSequence, template: &Template) -> f64 {
        let d: Vec<Vec<f64>> = (0..seq.len())
            .map(|t| {
                seq.frame(t)
                    .iter()
                    .zip(template.values())
                    .map(|(p, q)| (*p - *q) as f64)
                    .collect()
            })
            .collect();
        self.peak_opening(&d)
    }
}

fn quantize(x: f64) -> f32 {
    let q = (x.clamp(-1.0, 1.0) * i16::MAX as f64).round();
    (q / i16::MAX as f64) as f32
}

/// Harmonic source filtered by the phoneme's formants, with frication noise.
fn synthesize_audio(track: &PhonemeTrack, style: &SyntheticStyleSpec, seed: u64) -> Result<AudioClip> {
    let sr = TRAINING_SAMPLE_RATE as f64;
    let fps = track.fps as f64;
    let frames = track.len();
    let samples = ((frames as f64 / fps) * sr).round() as usize;
    let f0 = style.pitch();
    let harmonics = ((4000.0 / f0) as usize).max(1);
    let envelope: Vec<Vec<f64>> = track
        .frames
        .iter()
        .map(|&p| {
            let ph = PHONEMES[p];
            (1..=harmonics)
                .map(|h| {
                    let f = h as f64 * f0;
                    let r1 = (-((f - ph.formants.0) / 250.0).powi(2)).exp();
                    let r2 = 0.7 * (-((f - ph.formants.1) / 350.0).powi(2)).exp();
                    ph.loudness * (r1 + r2 + 0.02)
                })
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA0D1_0000);
    let vibrato_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(samples);
    for i in 0..samples {
        let pos = (i as f64 * fps / sr - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(frames - 1);
        let hi = (lo + 1).min(frames - 1);
        let w = (pos - lo as f64).min(1.0);
        let t = i as f64 / sr;
        let inst_f0 = f0 * (1.0 + 0.04 * (std::f64::consts::TAU * 0.7 * t + vibrato_phase).sin());
        phase = (phase + std::f64::consts::TAU * inst_f0 / sr) % std::f64::consts::TAU;
        let mut x = 0.0;
        for h in 0..harmonics {
            let amp = envelope[lo][h] * (1.0 - w) + envelope[hi][h] * w;
            x += amp * ((h + 1) as f64 * phase).sin();
        }
        let fric = PHONEMES[track.frames[lo]].frication * (1.0 - w) + PHONEMES[track.frames[hi]].frication * w;
        x = 0.12 * x + (0.08 * fric + 0.002) * rng.gen_range(-1.0..1.0);
        out.push(quantize(x));
    }
    AudioClip::new(out, TRAINING_SAMPLE_RATE)
}

/// One synthetic utterance: audio, vertex motion and speaker label. The
/// phoneme timing depends only on `content_seed`; the style shapes the
/// motion amplitude, protrusion and smoothness and the voice pitch.
pub fn generate_synthetic_pair(
    content_seed: u64,
    style: &SyntheticStyleSpec,
    frames: usize,
    fps: f32,
    face: &SyntheticFace,
    identities: usize,
) -> Result<(AudioClip, MotionSequence, IdentityLabel)> {
    style.validate()?;
    if frames < 2 {
        return Err(Error::Config("synthetic sequences need at least 2 frames".into()));
    }
    let track = phoneme_track(content_seed, frames, fps);
    let template = face.template(style.style_id)?;
    let disp = face.displacements(&track.targets(), style, true);
    let values: Vec<f32> = disp
        .iter()
        .flat_map(|d| d.iter().zip(template.values()).map(|(d, t)| (*t as f64 + d) as f32))
        .collect();
    let motion = MotionSequence::new(face.vertex_count(), fps, values)?;
    let audio = synthesize_audio(&track, style, content_seed)?;
    let label = IdentityLabel::new(style.style_id, identities)?;
    Ok((audio, motion, label))
}

/// Size and layout of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub styles: usize,
    pub sequences_per_style: usize,
    pub seconds: f64,
    pub fps: f32,
    pub seed: u64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            styles: 8,
            sequences_per_style: 200,
            seconds: 3.0,
            fps: 25.0,
            seed: 0,
            grid_rows: 8,
            grid_cols: 8,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.styles == 0 {
            return Err(Error::Config("data.styles must be positive".into()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Config("data.fps must be positive".into()));
        }
        if self.frames() < 2 {
            return Err(Error::Config("data.seconds too short for two frames".into()));
        }
        if !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0 && self.val_fraction + self.test_fraction < 1.0) {
            return Err(Error::Config("data.val_fraction + data.test_fraction must be below 1".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        (self.seconds * self.fps as f64).round() as usize
    }

    /// Split of the `index`-th sequence of a style.
    pub fn split_of(&self, index: usize) -> Split {
        let n = self.sequences_per_style as f64;
        let train_end = (n * (1.0 - self.val_fraction - self.test_fraction)).round() as usize;
        let val_end = (n * (1.0 - self.test_fraction)).round() as usize;
        if index < train_end {
            Split::Train
        } else if index < val_end {
            Split::Val
        } else {
            Split::Test
        }
    }

    /// Content seed of the `index`-th sequence of `style`.
    pub fn content_seed(&self, style: usize, index: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((style as u64) << 32 | index as u64)
    }
}

/// Generates the in-memory synthetic corpus described by `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let face = SyntheticFace::new(spec.grid_rows, spec.grid_cols)?;
    let templates = (0..spec.styles).map(|s| face.template(s)).collect::<Result<Vec<_>>>()?;
    let mut examples = Vec::with_capacity(spec.styles * spec.sequences_per_style);
    for style in 0..spec.styles {
        let style_spec = SyntheticStyleSpec::planted(style);
        for index in 0..spec.sequences_per_style {
            let (audio, motion, label) = generate_synthetic_pair(
                spec.content_seed(style, index),
                &style_spec,
                spec.frames(),
                spec.fps,
                &face,
                spec.styles,
            )?;
            examples.push(Example {
                audio,
                motion,
                label,
                template: templates[style].clone(),
                split: spec.split_of(index),
            });
        }
    }
    Ok(Corpus {
        topology: face.topology().clone(),
        templates,
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn face() -> SyntheticFace {
        SyntheticFace::new(8, 8).unwrap()
    }

    fn style(amp: f64) -> SyntheticStyleSpec {
        SyntheticStyleSpec {
            mouth_amplitude: amp,
            ..SyntheticStyleSpec::planted(2)
        }
    }

    #[test]
    fn same_content_same_timing() {
        let f = face();
        let (_, a, _) = generate_synthetic_pair(7, &SyntheticStyleSpec::planted(0), 50, 25.0, &f, 8).unwrap();
        let (_, b, _) = generate_synthetic_pair(7, &SyntheticStyleSpec::planted(3), 50, 25.0, &f, 8).unwrap();
        assert_eq!(a.len(), b.len());
        assert_ne!(a.values(), b.values());
        assert_eq!(phoneme_track(7, 50, 25.0), phoneme_track(7, 50, 25.0));
    }

    #[test]
    fn unsmoothed_peak_ratio_equals_amplitude_ratio() {
        let f = face();
        let targets = phoneme_track(11, 60, 25.0).targets();
        let lo = f.peak_opening(&f.displacements(&targets, &style(1.0), false));
        let hi = f.peak_opening(&f.displacements(&targets, &style(2.0), false));
        assert!((hi / lo - 2.0).abs() < 1e-6);
        let third = f.peak_opening(&f.displacements(&targets, &style(0.7), false));
        assert!((third / lo - 0.7).abs() < 1e-6);
    }

    #[test]
    fn doubling_amplitude_doubles_generated_peak() {
        let f = face();
        let tpl = f.template(2).unwrap();
        let (_, a, _) = generate_synthetic_pair(5, &style(1.0), 60, 25.0, &f, 8).unwrap();
        let (_, b, _) = generate_synthetic_pair(5, &style(2.0), 60, 25.0, &f, 8).unwrap();
        let ratio = f.peak_opening_of(&b, &tpl) / f.peak_opening_of(&a, &tpl);
        assert!((ratio - 2.0).abs() < 1e-4, "{ratio}");
    }

    #[test]
    fn invalid_styles_are_config_errors() {
        let f = face();
        for bad in [style(0.0), SyntheticStyleSpec { articulation_sharpness: 0.0, ..style(1.0) }] {
            assert!(matches!(
                generate_synthetic_pair(1, &bad, 10, 25.0, &f, 8),
                Err(Error::Config(_))
            ));
        }
        assert!(matches!(generate_synthetic_pair(1, &style(1.0), 1, 25.0, &f, 8), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let f = face();
        let a = generate_synthetic_pair(3, &style(1.3), 30, 25.0, &f, 8).unwrap();
        let b = generate_synthetic_pair(3, &style(1.3), 30, 25.0, &f, 8).unwrap();
        assert_eq!(a.0.samples(), b.0.samples());
        assert_eq!(a.1, b.1);
        let c = generate_synthetic_pair(4, &style(1.3), 30, 25.0, &f, 8).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn every_track_contains_the_open_vowel() {
        for seed in 0..20 {
            assert!(phoneme_track(seed, 40, 25.0).frames.contains(&0));
        }
    }

    #[test]
    fn audio_length_matches_motion() {
        let f = face();
        let (audio, motion, _) = generate_synthetic_pair(9, &style(1.0), 75, 25.0, &f, 8).unwrap();
        assert_eq!(audio.frame_count(25.0), motion.len());
        assert!(audio.samples().iter().all(|s| s.abs() <= 1.0));
    }

    #[test]
    fn lips_and_brow_are_disjoint() {
        let f = face();
        let lips = f.topology().lip_vertices();
        let brow = f.topology().upper_face_vertices();
        assert!(!lips.is_empty() && !brow.is_empty());
        assert!(lips.iter().all(|v| !brow.contains(v)));
    }
}
