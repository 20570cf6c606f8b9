use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether the theme is being promoted or suppressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Activation,
    Deactivation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationScore {
    pub behavioral: f64,
    pub coherence: f64,
    pub combined: f64,
    pub mode: ScoreMode,
}

impl GenerationScore {
    pub fn new(behavioral: f64, coherence: f64, mode: ScoreMode) -> Result<Self> {
        for (name, v) in [("behavioral", behavioral), ("coherence", coherence)] {
            if !(0.0..=5.0).contains(&v) {
                return Err(Error::invalid(format!("{name} score {v} outside [0, 5]")));
            }
        }
        let combined = match mode {
            ScoreMode::Activation => behavioral * coherence / 25.0,
            ScoreMode::Deactivation => (1.0 - behavioral / 5.0) * coherence / 5.0,
        };
        Ok(Self {
            behavioral,
            coherence,
            combined,
            mode,
        })
    }
}

/// What a generation is judged against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeSpec {
    /// Subject name handed to an external judge.
    pub name: String,
    /// Keywords counted by the builtin scorer (case-insensitive).
    #[serde(default)]
    pub keywords: Vec<String>,
    /// Byte tokens counted by the builtin scorer.
    #[serde(default)]
    pub token_class: Vec<u32>,
}

impl ThemeSpec {
    /// The digits class the planted toy theme promotes.
    pub fn digits() -> Self {
        Self {
            name: "Digits and numbers".into(),
            keywords: Vec::new(),
            token_class: (b'0'..=b'9').map(u32::from).collect(),
        }
    }
}

pub trait Scorer: Send + Sync {
    /// `Err` means the score is missing; callers must not substitute zeros.
    fn score(&self, text: &str, theme: &ThemeSpec, mode: ScoreMode) -> Result<GenerationScore>;
}

pub fn score_generation(text: &str, theme: &ThemeSpec, mode: ScoreMode, scorer: &dyn Scorer) -> Result<GenerationScore> {
    scorer.score(text, theme, mode)
}

/// Keyword and token-class frequencies mapped onto 0..=5 by fixed bins.
#[derive(Debug, Clone, Copy, Default)]
pub struct BuiltinScorer;

/// Upper edges of bins 0..4; anything above the last edge scores 5.
const BINS: [f64; 5] = [0.0, 0.1, 0.2, 0.35, 0.6];

fn bin(fraction: f64) -> f64 {
    BINS.iter().take_while(|&&edge| fraction > edge).count() as f64
}

impl BuiltinScorer {
    /// Share of non-whitespace characters covered by theme keywords or the
    /// theme token class.
    pub fn theme_fraction(text: &str, theme: &ThemeSpec) -> f64 {
        let chars: Vec<char> = text.chars().collect();
        let lower: Vec<char> = text.to_lowercase().chars().collect();
        // lowercasing can change length for a few scripts; fall back to raw
        let hay = if lower.len() == chars.len() { &lower } else { &chars };
        let mut covered = vec![false; chars.len()];
        for kw in theme.keywords.iter().filter(|k| !k.trim().is_empty()) {
            let needle: Vec<char> = kw.to_lowercase().chars().collect();
            let mut i = 0;
            while i + needle.len() <= hay.len() {
                if hay[i..i + needle.len()] == needle[..] {
                    covered[i..i + needle.len()].iter_mut().for_each(|c| *c = true);
                    i += needle.len();
                } else {
                    i += 1;
                }
            }
        }
        for (i, c) in chars.iter().enumerate() {
            if theme.token_class.contains(&(*c as u32)) {
                covered[i] = true;
            }
        }
        let mut total = 0usize;
        let mut hit = 0usize;
        for (c, cov) in chars.iter().zip(&covered) {
            if !c.is_whitespace() {
                total += 1;
                hit += usize::from(*cov);
            }
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }

    /// Share of characters that are printable ASCII or ordinary whitespace.
    pub fn printable_fraction(text: &str) -> f64 {
        let n = text.chars().count();
        if n == 0 {
            return 0.0;
        }
        let ok = text
            .chars()
            .filter(|c| c.is_ascii_graphic() || *c == ' ' || *c == '\n')
            .count();
        ok as f64 / n as f64
    }
}

impl Scorer for BuiltinScorer {
    fn score(&self, text: &str, theme: &ThemeSpec, mode: ScoreMode) -> Result<GenerationScore> {
        let behavioral = bin(Self::theme_fraction(text, theme));
        let coherence = bin(Self::printable_fraction(text));
        GenerationScore::new(behavioral, coherence, mode)
    }
}
