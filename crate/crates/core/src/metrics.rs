//! Edit-rate metrics (WER, CER, CMER), committee disagreement and the
//! correlation diagnostic.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::model::SampleId;
use crate::store::CommitteeArtifact;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizeConfig {
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        NormalizeConfig {
            lowercase: true,
            strip_punctuation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub raw: String,
    pub words: Vec<String>,
    /// Characters of the words joined by single spaces.
    pub chars: Vec<char>,
}

/// NFC, optional lowercasing and punctuation stripping, whitespace split.
///
/// Punctuation (anything that is neither alphanumeric, whitespace nor an
/// apostrophe) is replaced by a space, so `a,b` tokenizes as two words.
pub fn normalize(text: &str, config: &NormalizeConfig) -> TokenizedText {
    let nfc: String = text.nfc().collect();
    let cased = if config.lowercase {
        nfc.to_lowercase()
    } else {
        nfc
    };
    let cleaned: String = if config.strip_punctuation {
        cased
            .chars()
            .map(|c| {
                if c.is_alphanumeric() || c.is_whitespace() || c == '\'' {
                    c
                } else {
                    ' '
                }
            })
            .collect()
    } else {
        cased
    };
    let words: Vec<String> = cleaned.split_whitespace().map(str::to_owned).collect();
    let chars = words.join(" ").chars().collect();
    TokenizedText {
        raw: text.to_owned(),
        words,
        chars,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Distance over reference length. An empty reference divides by one,
    /// so the rate is the insertion count (zero when both are empty).
    pub fn rate(&self) -> f64 {
        if self.ref_len == 0 {
            self.insertions as f64
        } else {
            self.distance() as f64 / self.ref_len as f64
        }
    }
}

/// Minimal unit-cost alignment of `hyp` against `reference`.
///
/// Ties between optimal alignments are broken on the backtrace by
/// preferring the diagonal (match/substitution), then deletion, then
/// insertion.
pub fn edit_counts<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditCounts {
    let n = reference.len();
    let m = hyp.len();
    let w = m + 1;
    let mut dp = vec![0u32; (n + 1) * w];
    for j in 0..=m {
        dp[j] = j as u32;
    }
    for i in 1..=n {
        dp[i * w] = i as u32;
        for j in 1..=m {
            let sub = dp[(i - 1) * w + j - 1] + u32::from(reference[i - 1] != hyp[j - 1]);
            let del = dp[(i - 1) * w + j] + 1;
            let ins = dp[i * w + j - 1] + 1;
            dp[i * w + j] = sub.min(del).min(ins);
        }
    }

    let mut counts = EditCounts {
        ref_len: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if dp[(i - 1) * w + j - 1] + u32::from(!same) == here {
                if !same {
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// Word error rate of `hyp` against `reference`. May exceed 1.
pub fn wer(hyp: &str, reference: &str, config: &NormalizeConfig) -> f64 {
    let h = normalize(hyp, config);
    let r = normalize(reference, config);
    edit_counts(&h.words, &r.words).rate()
}

/// Character error rate; word boundaries count as single spaces.
pub fn cer(hyp: &str, reference: &str, config: &NormalizeConfig) -> f64 {
    let h = normalize(hyp, config);
    let r = normalize(reference, config);
    edit_counts(&h.chars, &r.chars).rate()
}

/// Character edit rate over non-space characters only, the disagreement
/// measure of the single-dropout-member committee baseline.
pub fn cmer(hyp: &str, reference: &str, config: &NormalizeConfig) -> f64 {
    let strip = |t: TokenizedText| -> Vec<char> { t.chars.into_iter().filter(|c| *c != ' ').collect() };
    let h = strip(normalize(hyp, config));
    let r = strip(normalize(reference, config));
    edit_counts(&h, &r).rate()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub sample_id: SampleId,
    pub value: f64,
    pub per_hypothesis_wer: Vec<f64>,
}

/// Mean WER of each stochastic hypothesis against the deterministic
/// reference transcription. Linear in the committee size.
pub fn committee_uncertainty(artifact: &CommitteeArtifact, config: &NormalizeConfig) -> UncertaintyScore {
    let reference = normalize(&artifact.reference, config);
    let per_hypothesis_wer: Vec<f64> = artifact
        .hypotheses
        .iter()
        .map(|h| edit_counts(&normalize(h, config).words, &reference.words).rate())
        .collect();
    let value = if per_hypothesis_wer.is_empty() {
        0.0
    } else {
        per_hypothesis_wer.iter().sum::<f64>() / per_hypothesis_wer.len() as f64
    };
    UncertaintyScore {
        sample_id: artifact.sample_id.clone(),
        value,
        per_hypothesis_wer,
    }
}

/// Scores every artifact on a pool of `workers` threads. Each sample is
/// computed independently, so the result does not depend on `workers`.
pub fn score_committee<'a, I>(
    artifacts: I,
    config: &NormalizeConfig,
    workers: usize,
) -> Result<BTreeMap<SampleId, UncertaintyScore>>
where
    I: IntoIterator<Item = &'a CommitteeArtifact>,
{
    let items: Vec<&CommitteeArtifact> = artifacts.into_iter().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let scores: Vec<UncertaintyScore> = pool.install(|| {
        items
            .par_iter()
            .map(|a| committee_uncertainty(a, config))
            .collect()
    });
    Ok(scores.into_iter().map(|s| (s.sample_id.clone(), s)).collect())
}

/// Mean token entropy over the transcription.
pub fn entropy_uncertainty(artifact: &CommitteeArtifact) -> Result<f64> {
    match artifact.token_entropies.as_deref() {
        Some(e) if !e.is_empty() => Ok(e.iter().sum::<f64>() / e.len() as f64),
        _ => Err(Error::MissingEntropies(artifact.sample_id.clone())),
    }
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::Correlation("need at least two points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Correlation("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> NormalizeConfig {
        NormalizeConfig::default()
    }

    fn art(reference: &str, hyps: &[&str]) -> CommitteeArtifact {
        CommitteeArtifact {
            sample_id: "s".into(),
            reference: reference.into(),
            hypotheses: hyps.iter().map(|s| s.to_string()).collect(),
            token_entropies: None,
        }
    }

    // Plain recursive-with-table Levenshtein, independent of the backtrace.
    fn oracle_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
        let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in t.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            t[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let c = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                t[i][j] = (t[i - 1][j - 1] + c).min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
            }
        }
        t[a.len()][b.len()]
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("The  CAT.", &cfg()).words, vec!["the", "cat"]);
        assert!(normalize("", &cfg()).words.is_empty());
        let keep = NormalizeConfig {
            strip_punctuation: false,
            ..cfg()
        };
        assert_eq!(normalize("a b", &keep).words, vec!["a", "b"]);
        assert_eq!(normalize("Hi, there!", &keep).words, vec!["hi,", "there!"]);
        // Decomposed e + combining acute composes to one char.
        assert_eq!(normalize("Cafe\u{301}", &cfg()).chars.len(), 4);
    }

    #[test]
    fn edit_count_examples() {
        let c = edit_counts(&["the", "cat"], &["the", "cat", "sat"]);
        assert_eq!((c.substitutions, c.deletions, c.insertions, c.ref_len), (0, 1, 0, 3));
        assert_eq!(oracle_distance(&["the", "cat"], &["the", "cat", "sat"]), 1);
        let c = edit_counts(&["a", "b"], &["a", "b"]);
        assert_eq!(c.distance(), 0);
        let c = edit_counts(&["x"], &[] as &[&str]);
        assert_eq!((c.substitutions, c.deletions, c.insertions, c.ref_len), (0, 0, 1, 0));
    }

    #[test]
    fn substitution_preferred_over_indel_pair() {
        let c = edit_counts(&["a", "x", "c"], &["a", "b", "c"]);
        assert_eq!((c.substitutions, c.deletions, c.insertions), (1, 0, 0));
    }

    #[test]
    fn wer_examples() {
        assert!((wer("the cat", "the cat sat", &cfg()) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer("same words", "same words", &cfg()), 0.0);
        assert_eq!(wer("a b c", "", &cfg()), 3.0);
        assert_eq!(wer("", "", &cfg()), 0.0);
    }

    #[test]
    fn cer_examples() {
        assert!((cer("cat", "cut", &cfg()) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cer("abc", "abc", &cfg()), 0.0);
        assert_eq!(cer("", "ab", &cfg()), 1.0);
        assert!((cer("a b", "ab", &cfg()) - 0.5).abs() < 1e-15);
        assert_eq!(cmer("a b", "ab", &cfg()), 0.0);
        assert_eq!(cmer("", "ab", &cfg()), 1.0);
    }

    #[test]
    fn committee_examples() {
        let u = committee_uncertainty(&art("a b", &["a b", "A B.", "a  b"]), &cfg());
        assert_eq!(u.value, 0.0);
        let u = committee_uncertainty(&art("a b", &["a b", "a c"]), &cfg());
        assert_eq!(u.per_hypothesis_wer, vec![0.0, 0.5]);
        assert_eq!(u.value, 0.25);
    }

    #[test]
    fn entropy_examples() {
        let mut a = art("x", &["x"]);
        a.token_entropies = Some(vec![0.0, 0.0, 0.0]);
        assert_eq!(entropy_uncertainty(&a).unwrap(), 0.0);
        a.token_entropies = Some(vec![1.0, 3.0]);
        assert_eq!(entropy_uncertainty(&a).unwrap(), 2.0);
        a.token_entropies = None;
        assert!(matches!(entropy_uncertainty(&a), Err(Error::MissingEntropies(_))));
        a.token_entropies = Some(vec![]);
        assert!(matches!(entropy_uncertainty(&a), Err(Error::MissingEntropies(_))));
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0, 5.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Correlation(_))));
        assert!(matches!(pearson(&[1.0], &[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
    }

    fn tokens() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..10, 0..=20)
    }

    proptest! {
        #[test]
        fn distance_matches_oracle(a in tokens(), b in tokens()) {
            let c = edit_counts(&a, &b);
            prop_assert_eq!(c.distance(), oracle_distance(&a, &b));
            prop_assert!(c.substitutions + c.deletions <= c.ref_len);
            prop_assert_eq!(c.ref_len + c.insertions - c.deletions, a.len());
        }

        #[test]
        fn distance_is_symmetric_and_triangular(a in tokens(), b in tokens(), c in tokens()) {
            let d = |x: &[u8], y: &[u8]| edit_counts(x, y).distance();
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        }

        #[test]
        fn uncertainty_order_invariant(hyps in prop::collection::vec("[ab ]{0,8}", 1..6)) {
            let refs: Vec<&str> = hyps.iter().map(String::as_str).collect();
            let u1 = committee_uncertainty(&art("a b a", &refs), &cfg()).value;
            let mut rev = refs.clone();
            rev.reverse();
            let u2 = committee_uncertainty(&art("a b a", &rev), &cfg()).value;
            prop_assert!((u1 - u2).abs() < 1e-12);
        }
    }

    #[test]
    fn wer_is_asymmetric() {
        let a = "one two";
        let b = "one two three four";
        assert_eq!(
            edit_counts(&normalize(a, &cfg()).words, &normalize(b, &cfg()).words).distance(),
            edit_counts(&normalize(b, &cfg()).words, &normalize(a, &cfg()).words).distance()
        );
        assert_ne!(wer(a, b, &cfg()), wer(b, a, &cfg()));
    }
}
