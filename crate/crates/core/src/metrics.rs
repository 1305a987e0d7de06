//! Frame-level F1 and detection cost, scored per recording and macro-averaged.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledUtterance;
use crate::error::{Error, Result};
use crate::model::{mlnet_forward, MlnetParams};
use crate::tensor::Real;

/// Weight of the miss rate in the detection cost.
pub const DCF_MISS_WEIGHT: f64 = 0.75;
/// Weight of the false-alarm rate in the detection cost.
pub const DCF_FALSE_ALARM_WEIGHT: f64 = 0.25;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// True when the reference has no speech frames or no non-speech frames,
    /// which leaves one of the DCF rates undefined.
    pub fn is_degenerate(&self) -> bool {
        self.tp + self.fn_ == 0 || self.fp + self.tn == 0
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

/// Tallies decisions `probs[t] >= theta` against `labels`.
pub fn confusion(probs: &[f64], labels: &[u8], theta: f64) -> Result<ConfusionCounts> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("threshold {theta} outside [0, 1]")));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= theta, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2TP / (2TP + FP + FN)`; with no positives in either reference or
/// hypothesis, 1 if nothing was misclassified and 0 otherwise.
pub fn f1(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return if c.fp == 0 && c.fn_ == 0 { 1.0 } else { 0.0 };
    }
    2.0 * c.tp as f64 / denom as f64
}

/// `0.75·P_miss + 0.25·P_false_alarm`. An undefined rate counts as 0.
pub fn dcf(c: &ConfusionCounts) -> f64 {
    let rate = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    DCF_MISS_WEIGHT * rate(c.fn_, c.tp + c.fn_) + DCF_FALSE_ALARM_WEIGHT * rate(c.fp, c.fp + c.tn)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingScore {
    pub id: String,
    pub f1: f64,
    pub dcf: f64,
    pub counts: ConfusionCounts,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub f1: f64,
    pub dcf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub theta: f64,
    pub recordings: Vec<RecordingScore>,
    /// Unweighted mean over recordings.
    #[serde(rename = "macro")]
    pub macro_avg: Summary,
    /// Metrics on counts pooled over all frames, when requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub micro: Option<Summary>,
}

/// A recording's predictions alongside its reference labels.
pub struct Scored<'a> {
    pub id: &'a str,
    pub probs: &'a [f64],
    pub labels: &'a [u8],
}

pub fn score_recordings(items: &[Scored<'_>], theta: f64, with_micro: bool) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let recordings = items
        .iter()
        .map(|s| {
            let counts = confusion(s.probs, s.labels, theta)?;
            if counts.is_degenerate() {
                log::warn!("recording {} lacks speech or non-speech frames; undefined rate set to 0", s.id);
            }
            Ok(RecordingScore {
                id: s.id.to_string(),
                f1: f1(&counts),
                dcf: dcf(&counts),
                counts,
                degenerate: counts.is_degenerate(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = recordings.len() as f64;
    let macro_avg = Summary {
        f1: recordings.iter().map(|r| r.f1).sum::<f64>() / n,
        dcf: recordings.iter().map(|r| r.dcf).sum::<f64>() / n,
    };
    let micro = with_micro.then(|| {
        let pooled = recordings
            .iter()
            .fold(ConfusionCounts::default(), |acc, r| acc.merge(&r.counts));
        Summary {
            f1: f1(&pooled),
            dcf: dcf(&pooled),
        }
    });
    Ok(EvalReport {
        theta,
        recordings,
        macro_avg,
        micro,
    })
}

/// Runs the model on every utterance and scores the result.
pub fn evaluate<T: Real>(
    corpus: &[LabeledUtterance],
    params: &MlnetParams<T>,
    theta: f64,
    with_micro: bool,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("evaluation corpus is empty".into()));
    }
    let probs = corpus
        .par_iter()
        .map(|u| mlnet_forward(&u.features, params).map(|p| p.probs))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<Scored<'_>> = corpus
        .iter()
        .zip(&probs)
        .map(|(u, p)| Scored {
            id: &u.source_id,
            probs: p,
            labels: &u.labels,
        })
        .collect();
    score_recordings(&items, theta, with_micro)
}

impl EvalReport {
    /// Tab-separated report with metrics in percent.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# theta={}\nid\tf1_pct\tdcf_pct\ttp\tfp\tfn\ttn\n", self.theta);
        for r in &self.recordings {
            let c = r.counts;
            out.push_str(&format!(
                "{}\t{:.2}\t{:.2}\t{}\t{}\t{}\t{}{}\n",
                r.id,
                100.0 * r.f1,
                100.0 * r.dcf,
                c.tp,
                c.fp,
                c.fn_,
                c.tn,
                if r.degenerate { "\tdegenerate" } else { "" }
            ));
        }
        out.push_str(&format!(
            "macro\t{:.2}\t{:.2}\n",
            100.0 * self.macro_avg.f1,
            100.0 * self.macro_avg.dcf
        ));
        if let Some(m) = self.micro {
            out.push_str(&format!("micro\t{:.2}\t{:.2}\n", 100.0 * m.f1, 100.0 * m.dcf));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidArgument(format!("report json: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let y = [1u8, 0, 1, 1, 0];
        let probs: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let c = confusion(&probs, &y, 0.5).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!(f1(&c), 1.0);
        assert_eq!(dcf(&c), 0.0);

        let c = confusion(&[1.0; 4], &[0; 4], 0.5).unwrap();
        assert_eq!(c.fp, 4);
    }

    #[test]
    fn ties_at_threshold_are_positive() {
        let c = confusion(&[0.5], &[0], 0.5).unwrap();
        assert_eq!(c.fp, 1);
    }

    #[test]
    fn f1_values() {
        assert_eq!(f1(&counts(10, 0, 0, 0)), 1.0);
        assert_eq!(f1(&counts(0, 5, 5, 0)), 0.0);
        assert!((f1(&counts(8, 2, 4, 0)) - 16.0 / 22.0).abs() < 1e-15);
        assert_eq!(f1(&counts(0, 0, 0, 7)), 1.0);
    }

    #[test]
    fn dcf_values() {
        assert_eq!(dcf(&counts(5, 5, 0, 0)), 0.25);
        assert!((dcf(&counts(9, 2, 1, 8)) - 0.125).abs() < 1e-15);
        let degenerate = counts(0, 1, 0, 3);
        assert!(degenerate.is_degenerate());
        assert_eq!(dcf(&degenerate), 0.25 * 0.25);
    }

    #[test]
    fn length_mismatch_and_bad_theta() {
        assert!(confusion(&[0.1, 0.2], &[1], 0.5).is_err());
        assert!(confusion(&[0.1], &[1], 1.5).is_err());
    }

    #[test]
    fn macro_average_of_two_recordings() {
        // first recording perfect, second F1 = 0.5
        let items = [
            Scored {
                id: "a",
                probs: &[1.0, 0.0],
                labels: &[1, 0],
            },
            Scored {
                id: "b",
                probs: &[1.0, 1.0, 0.0],
                labels: &[1, 0, 0],
            },
        ];
        let rep = score_recordings(&items, 0.5, false).unwrap();
        assert!((rep.recordings[1].f1 - 2.0 / 3.0).abs() < 1e-15);
        let items = [
            Scored {
                id: "a",
                probs: &[1.0, 0.0],
                labels: &[1, 0],
            },
            Scored {
                id: "b",
                probs: &[1.0, 0.0, 0.0, 0.0],
                labels: &[1, 1, 1, 0],
            },
        ];
        let rep = score_recordings(&items, 0.5, false).unwrap();
        assert_eq!(rep.recordings[1].f1, 0.5);
        assert_eq!(rep.macro_avg.f1, 0.75);
        let single = score_recordings(&items[..1], 0.5, false).unwrap();
        assert_eq!(single.macro_avg.f1, single.recordings[0].f1);
    }

    #[test]
    fn report_json_round_trip() {
        let items = [Scored {
            id: "a",
            probs: &[0.9, 0.2, 0.7],
            labels: &[1, 0, 0],
        }];
        let rep = score_recordings(&items, 0.5, true).unwrap();
        let back = EvalReport::from_json(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
        assert!(rep.to_tsv().contains("macro\t"));
    }
}
