//! Post-hoc evaluation: aggregate run metrics, per-step behavioral
//! signatures, and their CSV/SVG exports.
//!
//! A behavioral signature is the empirical distribution of action types at
//! each decision step, computed over the episodes still active at that step
//! (an episode that terminates at step t counts at step t: its final action
//! was chosen while active). The companion reachability curve is the number
//! of episodes still running at each step, which under the
//! success-or-timeout termination rule doubles as a cumulative-win proxy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{ActionKind, EpisodeTrace, ACTION_KINDS};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("no traces supplied")]
    NoTraces,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Aggregate metrics over one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub episodes: usize,
    pub wins: usize,
    /// Win rate in percent.
    pub win_rate: f64,
    pub return_mean: f64,
    pub return_std: f64,
    pub steps_mean: f64,
    pub steps_std: f64,
    /// Episode length statistics over winning episodes only.
    pub win_steps_mean: f64,
    pub win_steps_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Exact aggregation over a set of episode traces; population standard
/// deviations.
pub fn compute_metrics(traces: &[EpisodeTrace]) -> Result<RunMetrics, AnalysisError> {
    if traces.is_empty() {
        return Err(AnalysisError::NoTraces);
    }
    let returns: Vec<f64> = traces.iter().map(EpisodeTrace::total_return).collect();
    let steps: Vec<f64> = traces.iter().map(|t| t.steps() as f64).collect();
    let win_steps: Vec<f64> = traces
        .iter()
        .filter(|t| t.won())
        .map(|t| t.steps() as f64)
        .collect();
    let wins = win_steps.len();
    let (return_mean, return_std) = mean_std(&returns);
    let (steps_mean, steps_std) = mean_std(&steps);
    let (win_steps_mean, win_steps_std) = mean_std(&win_steps);
    Ok(RunMetrics {
        episodes: traces.len(),
        wins,
        win_rate: 100.0 * wins as f64 / traces.len() as f64,
        return_mean,
        return_std,
        steps_mean,
        steps_std,
        win_steps_mean,
        win_steps_std,
    })
}

/// Multi-seed aggregation: mean and std of the per-seed win rates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: usize,
    pub win_rate_mean: f64,
    pub win_rate_std: f64,
    pub per_seed: Vec<RunMetrics>,
}

pub fn summarize_seeds(per_seed: Vec<RunMetrics>) -> SeedSummary {
    let rates: Vec<f64> = per_seed.iter().map(|m| m.win_rate).collect();
    let (mean, std) = mean_std(&rates);
    SeedSummary {
        seeds: per_seed.len(),
        win_rate_mean: mean,
        win_rate_std: std,
        per_seed,
    }
}

/// Per-step action-type distribution over still-active episodes, plus the
/// reachability (active-count) curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehavioralSignature {
    /// One row per step; each row maps the five action types to their
    /// empirical probability among active episodes.
    pub step_distributions: Vec<BTreeMap<ActionKind, f64>>,
    /// Number of episodes still active (choosing an action) at each step.
    pub active_counts: Vec<usize>,
    pub total_episodes: usize,
}

impl BehavioralSignature {
    pub fn steps(&self) -> usize {
        self.step_distributions.len()
    }

    /// Fraction of episodes still active at `step`.
    pub fn active_fraction(&self, step: usize) -> f64 {
        self.active_counts[step] as f64 / self.total_episodes.max(1) as f64
    }
}

/// Compute the behavioral signature of a set of evaluation traces.
pub fn compute_signature(traces: &[EpisodeTrace]) -> Result<BehavioralSignature, AnalysisError> {
    if traces.is_empty() {
        return Err(AnalysisError::NoTraces);
    }
    let horizon = traces.iter().map(EpisodeTrace::steps).max().unwrap_or(0);
    let mut step_distributions = Vec::with_capacity(horizon);
    let mut active_counts = Vec::with_capacity(horizon);
    for step in 0..horizon {
        let mut counts: BTreeMap<ActionKind, usize> = BTreeMap::new();
        let mut active = 0usize;
        for trace in traces {
            if let Some(record) = trace.records.get(step) {
                *counts.entry(record.action.kind).or_insert(0) += 1;
                active += 1;
            }
        }
        let mut row = BTreeMap::new();
        for kind in ACTION_KINDS {
            let p = if active == 0 {
                0.0
            } else {
                counts.get(&kind).copied().unwrap_or(0) as f64 / active as f64
            };
            row.insert(kind, p);
        }
        step_distributions.push(row);
        active_counts.push(active);
    }
    Ok(BehavioralSignature {
        step_distributions,
        active_counts,
        total_episodes: traces.len(),
    })
}

/// Mean per-step total-variation distance between two signatures over the
/// steps where both have active episodes.
pub fn mean_tv_distance(a: &BehavioralSignature, b: &BehavioralSignature) -> f64 {
    let steps = a.steps().min(b.steps());
    let mut total = 0.0;
    let mut counted = 0usize;
    for t in 0..steps {
        if a.active_counts[t] == 0 || b.active_counts[t] == 0 {
            continue;
        }
        let tv: f64 = ACTION_KINDS
            .iter()
            .map(|k| (a.step_distributions[t][k] - b.step_distributions[t][k]).abs())
            .sum::<f64>()
            / 2.0;
        total += tv;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// CSV twin of the signature plot: one row per (step, action type) holding
/// the probability plus both forms of the reachability curve.
pub fn signature_csv(sig: &BehavioralSignature) -> String {
    let mut out = String::from("step,action_type,probability,active_count,active_fraction\n");
    for (step, row) in sig.step_distributions.iter().enumerate() {
        for kind in ACTION_KINDS {
            out.push_str(&format!(
                "{},{},{:.6},{},{:.6}\n",
                step,
                kind,
                row[&kind],
                sig.active_counts[step],
                sig.active_fraction(step)
            ));
        }
    }
    out
}

const SVG_WIDTH: f64 = 960.0;
const SVG_HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 56.0;
const MARGIN_RIGHT: f64 = 64.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 48.0;

const KIND_COLORS: [(ActionKind, &str); 5] = [
    (ActionKind::ScanNetwork, "#4e79a7"),
    (ActionKind::FindServices, "#f28e2b"),
    (ActionKind::FindData, "#76b7b2"),
    (ActionKind::ExploitService, "#e15759"),
    (ActionKind::ExfiltrateData, "#59a14f"),
];

/// Render the signature as a self-contained SVG: stacked per-step bars of
/// action-type proportions with the dashed reachability line on a secondary
/// axis. Rendering is deterministic (fixed precision, fixed ordering), so
/// identical inputs produce identical bytes.
pub fn render_signature_svg(sig: &BehavioralSignature, title: &str) -> String {
    let plot_w = SVG_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = SVG_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let steps = sig.steps().max(1);
    let bar_w = plot_w / steps as f64;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_WIDTH}\" height=\"{SVG_HEIGHT}\" viewBox=\"0 0 {SVG_WIDTH} {SVG_HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"22\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        SVG_WIDTH / 2.0,
        xml_escape(title)
    ));

    // stacked bars
    for (step, row) in sig.step_distributions.iter().enumerate() {
        if sig.active_counts[step] == 0 {
            continue;
        }
        let x = MARGIN_LEFT + step as f64 * bar_w;
        let mut y_top = MARGIN_TOP + plot_h;
        for (kind, color) in KIND_COLORS {
            let p = row[&kind];
            if p <= 0.0 {
                continue;
            }
            let h = p * plot_h;
            y_top -= h;
            svg.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>\n",
                x,
                y_top,
                (bar_w - 0.4).max(0.4),
                h,
                color
            ));
        }
    }

    // dashed reachability line on the secondary axis (fraction of episodes)
    let mut points = Vec::with_capacity(steps);
    for step in 0..sig.steps() {
        let x = MARGIN_LEFT + (step as f64 + 0.5) * bar_w;
        let y = MARGIN_TOP + plot_h * (1.0 - sig.active_fraction(step));
        points.push(format!("{x:.2},{y:.2}"));
    }
    if !points.is_empty() {
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#202020\" stroke-width=\"1.6\" stroke-dasharray=\"6,4\"/>\n",
            points.join(" ")
        ));
    }

    // axes
    svg.push_str(&format!(
        "<line x1=\"{l:.1}\" y1=\"{b:.1}\" x2=\"{r:.1}\" y2=\"{b:.1}\" stroke=\"black\"/>\n<line x1=\"{l:.1}\" y1=\"{t:.1}\" x2=\"{l:.1}\" y2=\"{b:.1}\" stroke=\"black\"/>\n<line x1=\"{r:.1}\" y1=\"{t:.1}\" x2=\"{r:.1}\" y2=\"{b:.1}\" stroke=\"black\"/>\n",
        l = MARGIN_LEFT,
        r = MARGIN_LEFT + plot_w,
        t = MARGIN_TOP,
        b = MARGIN_TOP + plot_h,
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">step</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        SVG_HEIGHT - 14.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {:.1})\" text-anchor=\"middle\">action share</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(90 {:.1} {:.1})\" text-anchor=\"middle\">episodes active (dashed)</text>\n",
        SVG_WIDTH - 16.0,
        MARGIN_TOP + plot_h / 2.0,
        SVG_WIDTH - 16.0,
        MARGIN_TOP + plot_h / 2.0
    ));

    // legend
    let mut lx = MARGIN_LEFT;
    for (kind, color) in KIND_COLORS {
        svg.push_str(&format!(
            "<rect x=\"{lx:.1}\" y=\"{y:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n<text x=\"{tx:.1}\" y=\"{ty:.1}\" font-family=\"sans-serif\" font-size=\"11\">{kind}</text>\n",
            y = SVG_HEIGHT - 40.0,
            tx = lx + 14.0,
            ty = SVG_HEIGHT - 31.0,
        ));
        lx += 150.0;
    }

    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Write the signature SVG and its CSV twin next to each other.
pub fn export_signature_plot(
    sig: &BehavioralSignature,
    title: &str,
    svg_path: impl AsRef<std::path::Path>,
) -> Result<(), AnalysisError> {
    let svg_path = svg_path.as_ref();
    std::fs::write(svg_path, render_signature_svg(sig, title))?;
    std::fs::write(svg_path.with_extension("csv"), signature_csv(sig))?;
    Ok(())
}

/// One row of the consolidated comparison table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub win_rate: f64,
    pub return_mean: f64,
    pub return_std: f64,
    pub steps_mean: f64,
    pub win_steps_mean: f64,
}

/// Consolidated table (one line per run) in CSV form:
/// label, win_rate, return, steps, win_steps.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("label,win_rate,return,return_std,steps,win_steps\n");
    for row in rows {
        out.push_str(&format!(
            "{},{:.3},{:.3},{:.3},{:.3},{:.3}\n",
            row.label, row.win_rate, row.return_mean, row.return_std, row.steps_mean,
            row.win_steps_mean
        ));
    }
    out
}

impl From<(&str, &RunMetrics)> for ComparisonRow {
    fn from((label, m): (&str, &RunMetrics)) -> Self {
        ComparisonRow {
            label: label.to_string(),
            win_rate: m.win_rate,
            return_mean: m.return_mean,
            return_std: m.return_std,
            steps_mean: m.steps_mean,
            win_steps_mean: m.win_steps_mean,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Action, EndReason, StepRecord};
    use std::net::Ipv4Addr;

    /// Synthesize a trace with the given action kinds and outcome.
    fn trace(kinds: &[ActionKind], won: bool) -> EpisodeTrace {
        let src = Ipv4Addr::new(192, 168, 2, 2);
        let tgt = Ipv4Addr::new(192, 168, 1, 2);
        let records = kinds
            .iter()
            .enumerate()
            .map(|(i, &kind)| {
                let last = i + 1 == kinds.len();
                let action = match kind {
                    ActionKind::ScanNetwork => {
                        Action::scan_network(src, "192.168.1.0/24".parse().unwrap())
                    }
                    _ => Action::find_services(src, tgt),
                };
                let mut action = action;
                action.kind = kind;
                StepRecord {
                    step: i as u32,
                    obs_digest: 0,
                    action,
                    reward: if last && won { 99.0 } else { -1.0 },
                    progressed: true,
                    end_reason: if last {
                        Some(if won { EndReason::Success } else { EndReason::Timeout })
                    } else {
                        None
                    },
                }
            })
            .collect();
        EpisodeTrace { records }
    }

    #[test]
    fn all_wins_at_five_steps() {
        let traces: Vec<EpisodeTrace> = (0..10)
            .map(|_| trace(&[ActionKind::ScanNetwork; 5], true))
            .collect();
        let m = compute_metrics(&traces).unwrap();
        assert_eq!(m.win_rate, 100.0);
        assert_eq!(m.return_mean, 95.0);
        assert_eq!(m.steps_mean, 5.0);
        assert_eq!(m.win_steps_mean, 5.0);
        assert_eq!(m.return_std, 0.0);
    }

    #[test]
    fn all_timeouts_with_step_costs() {
        let traces: Vec<EpisodeTrace> = (0..4)
            .map(|_| trace(&[ActionKind::FindServices; 100], false))
            .collect();
        let m = compute_metrics(&traces).unwrap();
        assert_eq!(m.win_rate, 0.0);
        assert_eq!(m.return_mean, -100.0);
        assert_eq!(m.steps_mean, 100.0);
        assert_eq!(m.win_steps_mean, 0.0);
    }

    #[test]
    fn mixed_set_matches_hand_computation() {
        // 10 synthetic traces: 4 wins at 5/7/9/11 steps, 6 timeouts at 20.
        let mut traces = Vec::new();
        for steps in [5usize, 7, 9, 11] {
            traces.push(trace(&vec![ActionKind::ExploitService; steps], true));
        }
        for _ in 0..6 {
            traces.push(trace(&[ActionKind::FindData; 20], false));
        }
        let m = compute_metrics(&traces).unwrap();
        // hand-computed: returns are 100-5, 100-7, 100-9, 100-11, and -20 x6
        assert_eq!(m.episodes, 10);
        assert_eq!(m.wins, 4);
        assert_eq!(m.win_rate, 40.0);
        let expected_returns = [95.0, 93.0, 91.0, 89.0, -20.0, -20.0, -20.0, -20.0, -20.0, -20.0];
        let mean: f64 = expected_returns.iter().sum::<f64>() / 10.0;
        assert!((m.return_mean - mean).abs() < 1e-12);
        let var: f64 = expected_returns
            .iter()
            .map(|r| (r - mean) * (r - mean))
            .sum::<f64>()
            / 10.0;
        assert!((m.return_std - var.sqrt()).abs() < 1e-12);
        assert_eq!(m.win_steps_mean, 8.0); // (5+7+9+11)/4
        assert!((m.steps_mean - 15.2).abs() < 1e-12); // (5+7+9+11+120)/10
    }

    #[test]
    fn metrics_are_order_invariant() {
        let mut traces = vec![
            trace(&[ActionKind::ScanNetwork; 5], true),
            trace(&[ActionKind::FindData; 30], false),
            trace(&[ActionKind::ExploitService; 8], true),
        ];
        let a = compute_metrics(&traces).unwrap();
        traces.reverse();
        let b = compute_metrics(&traces).unwrap();
        assert_eq!(a, b);
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn signature_rows_sum_to_one_and_first_step_is_pure() {
        let traces = vec![
            trace(&[ActionKind::ScanNetwork, ActionKind::FindServices], false),
            trace(&[ActionKind::ScanNetwork, ActionKind::FindData], false),
        ];
        let sig = compute_signature(&traces).unwrap();
        assert_eq!(sig.step_distributions[0][&ActionKind::ScanNetwork], 1.0);
        for row in &sig.step_distributions {
            let sum: f64 = row.values().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn active_counts_match_terminations() {
        // 500 traces, 100 of which end before step 20
        let mut traces = Vec::new();
        for _ in 0..100 {
            traces.push(trace(&[ActionKind::ScanNetwork; 15], true));
        }
        for _ in 0..400 {
            traces.push(trace(&[ActionKind::FindServices; 40], false));
        }
        let sig = compute_signature(&traces).unwrap();
        assert_eq!(sig.active_counts[0], 500);
        assert_eq!(sig.active_counts[14], 500, "terminal step still counts");
        assert_eq!(sig.active_counts[20], 400);
        for window in sig.active_counts.windows(2) {
            assert!(window[0] >= window[1], "active counts are non-increasing");
        }
    }

    #[test]
    fn svg_and_csv_are_deterministic() {
        let traces = vec![
            trace(&[ActionKind::ScanNetwork, ActionKind::ExploitService], true),
            trace(&[ActionKind::ScanNetwork, ActionKind::FindData], false),
        ];
        let sig = compute_signature(&traces).unwrap();
        let a = render_signature_svg(&sig, "sample");
        let b = render_signature_svg(&sig, "sample");
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.contains("stroke-dasharray"));
        let csv = signature_csv(&sig);
        assert_eq!(csv, signature_csv(&sig));
        // header + steps x 5 kinds
        assert_eq!(csv.lines().count(), 1 + sig.steps() * 5);
    }

    #[test]
    fn tv_distance_zero_on_identical_signatures() {
        let traces = vec![
            trace(&[ActionKind::ScanNetwork, ActionKind::FindServices], false),
            trace(&[ActionKind::FindData, ActionKind::FindServices], false),
        ];
        let sig = compute_signature(&traces).unwrap();
        assert_eq!(mean_tv_distance(&sig, &sig), 0.0);
        let other = compute_signature(&[trace(&[ActionKind::ExploitService; 2], false)]).unwrap();
        assert!(mean_tv_distance(&sig, &other) > 0.5);
    }
}
