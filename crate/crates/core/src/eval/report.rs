use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::fsl::EpisodeSummary;
use super::localize::PcpReport;
use super::Mode;

/// `2us/(u+s)`, 0 when both are 0.
pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u + s == 0.0 {
        0.0
    } else {
        2.0 * u * s / (u + s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAccuracy {
    pub id: u32,
    pub seen: bool,
    pub correct: usize,
    pub total: usize,
}

impl ClassAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: Mode,
    /// Classes with at least one test image, ascending id.
    pub classes: Vec<ClassAccuracy>,
    /// Mean per-class top-1 accuracy.
    pub t1: f64,
    pub unseen: Option<f64>,
    pub seen: Option<f64>,
    pub harmonic: Option<f64>,
    pub gamma: Option<f64>,
    pub pcp: Option<PcpReport>,
    pub episodes: Option<EpisodeSummary>,
    /// `(true, predicted, count)` for every nonzero cell, sorted.
    pub confusion: Vec<(u32, u32, usize)>,
}

fn mean(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in vals {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Per-class top-1 report. For generalized modes `seen_ids` splits the
/// classes into the seen (`s`) and unseen (`u`) halves of the harmonic mean.
pub fn accuracy_report(mode: Mode, truth: &[u32], pred: &[u32], seen_ids: &[u32]) -> EvalReport {
    let mut per: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    let mut confusion: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        let e = per.entry(t).or_default();
        e.1 += 1;
        if t == p {
            e.0 += 1;
        }
        *confusion.entry((t, p)).or_default() += 1;
    }
    let classes: Vec<ClassAccuracy> = per
        .into_iter()
        .map(|(id, (correct, total))| ClassAccuracy {
            id,
            seen: seen_ids.contains(&id),
            correct,
            total,
        })
        .collect();
    let t1 = mean(classes.iter().map(ClassAccuracy::accuracy)).unwrap_or(0.0);
    let (unseen, seen, harmonic) = if matches!(mode, Mode::Gzsl | Mode::Gfsl) {
        let u = mean(
            classes
                .iter()
                .filter(|c| !c.seen)
                .map(ClassAccuracy::accuracy),
        );
        let s = mean(
            classes
                .iter()
                .filter(|c| c.seen)
                .map(ClassAccuracy::accuracy),
        );
        let h = match (u, s) {
            (Some(u), Some(s)) => Some(harmonic_mean(u, s)),
            _ => None,
        };
        (u, s, h)
    } else {
        (None, None, None)
    };
    EvalReport {
        mode,
        classes,
        t1,
        unseen,
        seen,
        harmonic,
        gamma: None,
        pcp: None,
        episodes: None,
        confusion: confusion.into_iter().map(|((t, p), n)| (t, p, n)).collect(),
    }
}

impl EvalReport {
    /// Report of an episodic few-shot run: `t1` is the mean episode accuracy.
    pub fn from_episodes(summary: EpisodeSummary) -> Self {
        EvalReport {
            mode: Mode::Fsl,
            classes: Vec::new(),
            t1: summary.mean,
            unseen: None,
            seen: None,
            harmonic: None,
            gamma: None,
            pcp: None,
            episodes: Some(summary),
            confusion: Vec::new(),
        }
    }

    /// Number of test predictions that fell on a class of `ids`.
    pub fn predictions_in(&self, ids: &[u32]) -> usize {
        self.confusion
            .iter()
            .filter(|(_, p, _)| ids.contains(p))
            .map(|(_, _, n)| n)
            .sum()
    }

    /// Tab-separated rendering with the header `metric scope correct total value`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tscope\tcorrect\ttotal\tvalue\n");
        let mut row = |m: &str, scope: &str, c: Option<usize>, t: Option<usize>, v: String| {
            let opt = |x: Option<usize>| x.map_or("-".to_string(), |x| x.to_string());
            let _ = writeln!(s, "{m}\t{scope}\t{}\t{}\t{v}", opt(c), opt(t));
        };
        row("mode", "all", None, None, self.mode.as_str().to_string());
        if let Some(g) = self.gamma {
            row("gamma", "all", None, None, format!("{g}"));
        }
        for c in &self.classes {
            let scope = format!("class{}:{}", c.id, if c.seen { "seen" } else { "unseen" });
            row(
                "class_t1",
                &scope,
                Some(c.correct),
                Some(c.total),
                format!("{:.6}", c.accuracy()),
            );
        }
        row("t1", "all", None, None, format!("{:.6}", self.t1));
        for (name, v) in [("u", self.unseen), ("s", self.seen), ("h", self.harmonic)] {
            if let Some(v) = v {
                row(name, "all", None, None, format!("{v:.6}"));
            }
        }
        if let Some(e) = &self.episodes {
            let scope = format!("{}way{}shot{}query", e.way, e.shot, e.query);
            row("episodes", &scope, None, None, e.episodes.to_string());
            row("fsl_mean", &scope, None, None, format!("{:.6}", e.mean));
            row("fsl_ci95", &scope, None, None, format!("{:.6}", e.ci95));
        }
        if let Some(p) = &self.pcp {
            for part in &p.parts {
                row(
                    "pcp",
                    &part.name,
                    Some(part.correct),
                    Some(part.total),
                    format!("{:.6}", part.score()),
                );
            }
            row("mean_pcp", "all", None, None, format!("{:.6}", p.mean));
            row("pcp_skipped", "all", None, None, p.skipped.to_string());
        }
        for &(t, p, n) in &self.confusion {
            row(
                "confusion",
                &format!("{t}->{p}"),
                None,
                Some(n),
                n.to_string(),
            );
        }
        s
    }
}
