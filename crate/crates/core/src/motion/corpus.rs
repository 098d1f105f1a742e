//! Synthetic motion–text pairs on the toy skeleton.
//!
//! Each class drives one body part with a smooth ramp or sinusoid on top of a
//! fixed rest pose, plus small Gaussian noise. Sentences always contain the
//! class key words, surrounded by random filler words.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::split_words;

use super::sequence::MotionSequence;
#[cfg(test)]
use super::sequence::resample_frames;
use super::skeleton::{Skeleton, TokenLayout};

pub const TOY_FPS: u32 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextSample {
    pub words: Vec<String>,
    pub sentence: String,
}

impl TextSample {
    pub fn new(sentence: &str) -> Result<Self> {
        let words = split_words(sentence);
        if words.is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(Self {
            words,
            sentence: sentence.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSample {
    pub motion: MotionSequence,
    pub text: TextSample,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Lengths are truncated to a multiple of this.
    pub downsample_rate: usize,
    pub noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            samples_per_class: 40,
            min_len: 16,
            max_len: 48,
            downsample_rate: 4,
            noise: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MotionClass {
    pub name: &'static str,
    pub key_words: &'static [&'static str],
}

pub const MOTION_CLASSES: [MotionClass; 6] = [
    MotionClass {
        name: "raise left arm",
        key_words: &["raise", "left", "arm"],
    },
    MotionClass {
        name: "raise right arm",
        key_words: &["raise", "right", "arm"],
    },
    MotionClass {
        name: "wave both arms",
        key_words: &["wave", "both", "arms"],
    },
    MotionClass {
        name: "crouch down",
        key_words: &["crouch", "down"],
    },
    MotionClass {
        name: "kick left leg",
        key_words: &["kick", "left", "leg"],
    },
    MotionClass {
        name: "kick right leg",
        key_words: &["kick", "right", "leg"],
    },
];

pub const FILLER_WORDS: [&str; 14] = [
    "a", "the", "person", "man", "woman", "slowly", "quickly", "then", "and", "carefully", "gently", "now",
    "someone", "standing",
];

pub fn class_by_name(name: &str) -> Option<usize> {
    MOTION_CLASSES.iter().position(|c| c.name == name)
}

// Toy joints: 0 pelvis, 1-2 left arm, 3-4 right arm, 5-6 left leg, 7-8 right leg.
const REST_POSE: [[f64; 3]; 8] = [
    [-0.2, 1.4, 0.0],
    [-0.3, 0.9, 0.0],
    [0.2, 1.4, 0.0],
    [0.3, 0.9, 0.0],
    [-0.1, 0.9, 0.0],
    [-0.1, 0.1, 0.0],
    [0.1, 0.9, 0.0],
    [0.1, 0.1, 0.0],
];

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Column of channel `c` of joint `j` (1-based joint index) in the toy layout.
fn joint_col(j: usize, c: usize) -> usize {
    let l = TokenLayout::toy();
    l.root_dim + (j - 1) * l.joint_dim + c
}

fn contact_col(foot: usize) -> usize {
    TokenLayout::toy().width(9) - 2 + foot
}

fn class_frames(class: usize, len: usize, amp: f64, speed: f64) -> Vec<Vec<f64>> {
    let width = TokenLayout::toy().width(9);
    let mut frames = Vec::with_capacity(len);
    for t in 0..len {
        let u = t as f64 / (len - 1) as f64;
        let mut f = vec![0.0; width];
        f[0] = 1.0; // root height
        for (j, p) in REST_POSE.iter().enumerate() {
            for c in 0..3 {
                f[joint_col(j + 1, c)] = p[c];
            }
        }
        f[contact_col(0)] = 1.0;
        f[contact_col(1)] = 1.0;

        let ramp = smoothstep(u * speed / 0.6);
        match class {
            0 | 1 => {
                let (shoulder, hand) = if class == 0 { (1, 2) } else { (3, 4) };
                f[joint_col(shoulder, 1)] += 0.4 * amp * ramp;
                f[joint_col(hand, 1)] += 1.2 * amp * ramp;
                f[joint_col(hand, 2)] += 0.3 * amp * ramp;
            }
            2 => {
                let w = (2.0 * std::f64::consts::PI * 2.0 * speed * u).sin();
                for hand in [2, 4] {
                    f[joint_col(hand, 0)] += 0.6 * amp * w;
                    f[joint_col(hand, 1)] += 0.5 * amp;
                }
            }
            3 => {
                f[0] -= 0.5 * amp * ramp;
                f[1] = -0.05 * amp * ramp;
                for j in [5, 7] {
                    f[joint_col(j, 1)] -= 0.5 * amp * ramp;
                    f[joint_col(j + 1, 2)] += 0.4 * amp * ramp;
                }
                f[joint_col(1, 1)] -= 0.5 * amp * ramp;
                f[joint_col(3, 1)] -= 0.5 * amp * ramp;
            }
            4 | 5 => {
                let (hip, foot, contact) = if class == 4 { (5, 6, 0) } else { (7, 8, 1) };
                let bump = (std::f64::consts::PI * (u * speed).min(1.0)).sin();
                f[joint_col(foot, 2)] += 0.9 * amp * bump;
                f[joint_col(foot, 1)] += 0.4 * amp * bump;
                f[joint_col(hip, 2)] += 0.2 * amp * bump;
                f[contact_col(contact)] = if bump > 0.2 { 0.0 } else { 1.0 };
            }
            _ => unreachable!("class index validated by caller"),
        }
        frames.push(f);
    }
    frames
}

fn sentence_for<R: Rng>(class: usize, rng: &mut R) -> String {
    let mut words: Vec<&str> = Vec::new();
    for _ in 0..rng.gen_range(1..=3) {
        words.push(FILLER_WORDS.choose(rng).expect("non-empty"));
    }
    words.extend_from_slice(MOTION_CLASSES[class].key_words);
    for _ in 0..rng.gen_range(0..=2) {
        words.push(FILLER_WORDS.choose(rng).expect("non-empty"));
    }
    format!("{}.", words.join(" "))
}

/// Independent RNG stream for sample `index`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates one motion of `class` with the given random stream.
pub fn synthesize_motion<R: Rng>(class: usize, cfg: &CorpusConfig, rng: &mut R) -> Result<MotionSequence> {
    if class >= MOTION_CLASSES.len() {
        return Err(Error::Index {
            index: class,
            bound: MOTION_CLASSES.len(),
        });
    }
    let rate = cfg.downsample_rate.max(1);
    let raw_len = rng.gen_range(cfg.min_len..=cfg.max_len);
    let len = (raw_len / rate * rate).max(rate.max(2));
    let amp = rng.gen_range(0.9..1.1);
    let speed = rng.gen_range(0.95..1.05);
    let mut frames = class_frames(class, len, amp, speed);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for f in &mut frames {
        for v in f.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    MotionSequence::new(Tensor::from_rows(&frames)?, TokenLayout::toy(), Skeleton::toy(), TOY_FPS)
}

/// `n_classes · samples_per_class` samples, class-major. Sample `i` draws from
/// its own stream derived from `(seed, i)`.
pub fn generate_synthetic_corpus(seed: u64, cfg: &CorpusConfig) -> Result<Vec<CorpusSample>> {
    if cfg.n_classes < 2 || cfg.n_classes > MOTION_CLASSES.len() {
        return Err(Error::config(
            "corpus.n_classes",
            format!("must be in 2..={}, got {}", MOTION_CLASSES.len(), cfg.n_classes),
        ));
    }
    if cfg.min_len < 2 || cfg.min_len > cfg.max_len || cfg.max_len < cfg.downsample_rate {
        return Err(Error::config(
            "corpus.min_len",
            format!("invalid length range {}..={}", cfg.min_len, cfg.max_len),
        ));
    }
    let mut out = Vec::with_capacity(cfg.n_classes * cfg.samples_per_class);
    for class in 0..cfg.n_classes {
        for k in 0..cfg.samples_per_class {
            let index = (class * cfg.samples_per_class + k) as u64;
            let mut rng = sample_rng(seed, index);
            let motion = synthesize_motion(class, cfg, &mut rng)?;
            let text = TextSample::new(&sentence_for(class, &mut rng))?;
            out.push(CorpusSample { motion, text, class });
        }
    }
    Ok(out)
}
