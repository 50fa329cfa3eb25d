//! Threshold-free evaluation: AUC, partial AUC, per-domain AUC, and the
//! harmonic-mean official score.
//!
//! Anomalies are the positive class and a higher score means more anomalous.
//! Ties get half credit, and both AUC routes (pairwise counting and
//! trapezoidal integration of the tie-aware ROC) reduce to the same integer
//! numerator over `2·n·m`, so they agree bit for bit rather than merely
//! closely. Everything here works in `f64` regardless of the model's scalar
//! type; scores are plain numbers by the time they reach evaluation.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{Domain, Label};
use crate::error::{Error, Result};

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyClass(name.to_string()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig(format!("non-finite score among {name} values")));
    }
    Ok(())
}

/// Area under the ROC by direct pair counting: each (anomaly, normal) pair
/// contributes 1 if the anomaly scores higher, 1/2 on a tie.
pub fn auc(normals: &[f64], anomalies: &[f64]) -> Result<f64> {
    check_scores("normal", normals)?;
    check_scores("anomaly", anomalies)?;
    let mut numerator: u128 = 0;
    for &a in anomalies {
        for &b in normals {
            if a > b {
                numerator += 2;
            } else if a == b {
                numerator += 1;
            }
        }
    }
    let denom = 2u128 * normals.len() as u128 * anomalies.len() as u128;
    Ok(numerator as f64 / denom as f64)
}

/// Tie-aware ROC as cumulative integer counts `(false positives, true
/// positives)`, one point per distinct score value in descending order,
/// starting at (0, 0) and ending at (n, m).
pub fn roc_counts(normals: &[f64], anomalies: &[f64]) -> Result<Vec<(u64, u64)>> {
    check_scores("normal", normals)?;
    check_scores("anomaly", anomalies)?;
    let mut ns = normals.to_vec();
    let mut an = anomalies.to_vec();
    ns.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    an.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut points = vec![(0u64, 0u64)];
    let (mut i, mut j) = (0usize, 0usize);
    let (mut fp, mut tp) = (0u64, 0u64);
    while i < ns.len() || j < an.len() {
        let v = match (ns.get(i), an.get(j)) {
            (Some(&x), Some(&y)) => x.max(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        while i < ns.len() && ns[i] == v {
            fp += 1;
            i += 1;
        }
        while j < an.len() && an[j] == v {
            tp += 1;
            j += 1;
        }
        points.push((fp, tp));
    }
    Ok(points)
}

/// AUC as the trapezoidal area under [`roc_counts`]. Exercised against the
/// pairwise route; the two are exactly equal.
pub fn auc_trapezoid(normals: &[f64], anomalies: &[f64]) -> Result<f64> {
    let points = roc_counts(normals, anomalies)?;
    let mut numerator: u128 = 0;
    for pair in points.windows(2) {
        let (fp0, tp0) = pair[0];
        let (fp1, tp1) = pair[1];
        numerator += (fp1 - fp0) as u128 * (tp0 + tp1) as u128;
    }
    let denom = 2u128 * normals.len() as u128 * anomalies.len() as u128;
    Ok(numerator as f64 / denom as f64)
}

/// Area under the ROC restricted to false-positive rates in [0, p], with
/// linear interpolation at FPR = p, normalized by p. `pauc(…, 1.0)` takes
/// the integer pairwise route, so it equals [`auc`] exactly.
pub fn pauc(normals: &[f64], anomalies: &[f64], p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidConfig(format!("pauc requires 0 < p <= 1, got {p}")));
    }
    if p == 1.0 {
        return auc(normals, anomalies);
    }
    let points = roc_counts(normals, anomalies)?;
    let n = normals.len() as f64;
    let m = anomalies.len() as f64;
    let x_limit = p * n;
    // Twice the area in count units; products of counts stay exact in f64.
    let mut twice_area = 0.0f64;
    for pair in points.windows(2) {
        let (fp0, tp0) = (pair[0].0 as f64, pair[0].1 as f64);
        let (fp1, tp1) = (pair[1].0 as f64, pair[1].1 as f64);
        if fp1 <= x_limit {
            twice_area += (fp1 - fp0) * (tp0 + tp1);
        } else if fp0 < x_limit {
            let t = (x_limit - fp0) / (fp1 - fp0);
            let tp_x = tp0 + t * (tp1 - tp0);
            twice_area += (x_limit - fp0) * (tp0 + tp_x);
            break;
        } else {
            break;
        }
    }
    Ok(twice_area / (2.0 * n * m) / p)
}

/// McClish-standardized partial AUC: 0.5·(1 + (A − A_min)/(A_max − A_min))
/// with A the raw clipped area, A_min = p²/2 (chance), A_max = p (perfect).
pub fn pauc_mcclish(normals: &[f64], anomalies: &[f64], p: f64) -> Result<f64> {
    let raw = pauc(normals, anomalies, p)? * p;
    let a_min = p * p / 2.0;
    let a_max = p;
    Ok(0.5 * (1.0 + (raw - a_min) / (a_max - a_min)))
}

/// One test clip's score with the labels evaluation needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledScore {
    pub score: f64,
    pub label: Label,
    pub domain: Domain,
}

fn split_scores(rows: &[LabeledScore]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut normals = Vec::new();
    let mut anomalies = Vec::new();
    for r in rows {
        match r.label {
            Label::Normal => normals.push(r.score),
            Label::Anomaly => anomalies.push(r.score),
            Label::Unknown => {
                return Err(Error::MissingLabels(
                    "evaluation needs every test clip labeled normal or anomaly".into(),
                ))
            }
        }
    }
    Ok((normals, anomalies))
}

/// AUC of one domain's normal clips against every anomalous clip of the
/// machine, regardless of the anomaly's domain.
pub fn domain_auc(rows: &[LabeledScore], domain: Domain) -> Result<f64> {
    let (_, anomalies) = split_scores(rows)?;
    let normals: Vec<f64> = rows
        .iter()
        .filter(|r| r.label == Label::Normal && r.domain == domain)
        .map(|r| r.score)
        .collect();
    if normals.is_empty() {
        return Err(Error::MissingDomain { domain: domain.to_string() });
    }
    auc(&normals, &anomalies)
}

/// n / Σ(1/vᵢ); every input must be positive.
pub fn hmean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("harmonic mean of an empty list".into()));
    }
    let mut recip = 0.0f64;
    for &v in values {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::NonPositiveHmeanInput(v));
        }
        recip += 1.0 / v;
    }
    Ok(values.len() as f64 / recip)
}

/// Per-machine evaluation triple, all in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MachineReport {
    pub machine: String,
    pub auc_source: f64,
    pub auc_target: f64,
    pub pauc: f64,
}

impl MachineReport {
    pub fn metrics(&self) -> [f64; 3] {
        [self.auc_source, self.auc_target, self.pauc]
    }

    pub fn hmean(&self) -> Result<f64> {
        hmean(&self.metrics())
    }
}

/// Whole-corpus evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub machines: Vec<MachineReport>,
    pub p: f64,
    pub mcclish: bool,
    /// Harmonic mean of all 3 × machines metric values.
    pub official: f64,
}

/// Harmonic mean over the flattened per-machine metric triples.
pub fn official_score(reports: &[MachineReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::InvalidConfig("no machines to score".into()));
    }
    let values: Vec<f64> = reports.iter().flat_map(|r| r.metrics()).collect();
    hmean(&values)
}

/// Evaluates each machine's labeled scores and assembles the report.
/// The map keys the rows by machine name; order in the report follows the
/// map's sorted order.
pub fn evaluate(
    per_machine: &BTreeMap<String, Vec<LabeledScore>>,
    p: f64,
    mcclish: bool,
) -> Result<EvalReport> {
    let mut machines = Vec::with_capacity(per_machine.len());
    for (name, rows) in per_machine {
        let (normals, anomalies) = split_scores(rows)?;
        if normals.is_empty() {
            return Err(Error::EmptyClass(format!("{name} normal")));
        }
        if anomalies.is_empty() {
            return Err(Error::EmptyClass(format!("{name} anomaly")));
        }
        let pauc_value = if mcclish {
            pauc_mcclish(&normals, &anomalies, p)?
        } else {
            pauc(&normals, &anomalies, p)?
        };
        machines.push(MachineReport {
            machine: name.clone(),
            auc_source: domain_auc(rows, Domain::Source)?,
            auc_target: domain_auc(rows, Domain::Target)?,
            pauc: pauc_value,
        });
    }
    let official = official_score(&machines)?;
    Ok(EvalReport { machines, p, mcclish, official })
}

impl EvalReport {
    /// Aligned table with percentages at two decimals.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>10} {:>10} {:>8} {:>8}\n",
            "machine", "auc_source", "auc_target", "pauc", "hmean"
        ));
        for m in &self.machines {
            out.push_str(&format!(
                "{:<12} {:>10.2} {:>10.2} {:>8.2} {:>8.2}\n",
                m.machine,
                m.auc_source * 100.0,
                m.auc_target * 100.0,
                m.pauc * 100.0,
                m.hmean().map(|h| h * 100.0).unwrap_or(f64::NAN)
            ));
        }
        out.push_str(&format!("official score: {:.2}\n", self.official * 100.0));
        out
    }

    /// CSV rows per machine plus an `ALL` row; the `ALL` metric columns hold
    /// per-column harmonic means and its hmean column is the official score.
    pub fn render_csv(&self) -> Result<String> {
        let mut out = String::from("machine,auc_source,auc_target,pauc,hmean\n");
        for m in &self.machines {
            out.push_str(&format!(
                "{},{:.2},{:.2},{:.2},{:.2}\n",
                m.machine,
                m.auc_source * 100.0,
                m.auc_target * 100.0,
                m.pauc * 100.0,
                m.hmean()? * 100.0
            ));
        }
        let col = |f: fn(&MachineReport) -> f64| -> Result<f64> {
            hmean(&self.machines.iter().map(f).collect::<Vec<_>>())
        };
        out.push_str(&format!(
            "ALL,{:.2},{:.2},{:.2},{:.2}\n",
            col(|m| m.auc_source)? * 100.0,
            col(|m| m.auc_target)? * 100.0,
            col(|m| m.pauc)? * 100.0,
            self.official * 100.0
        ));
        Ok(out)
    }

    /// Full-precision JSON lines: one object per machine, then a summary
    /// object carrying the official score.
    pub fn render_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            machine: &'a str,
            official: f64,
            p: f64,
            mcclish: bool,
        }
        let mut out = String::new();
        for m in &self.machines {
            out.push_str(&serde_json::to_string(m)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&Summary {
            machine: "ALL",
            official: self.official,
            p: self.p,
            mcclish: self.mcclish,
        })?);
        out.push('\n');
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_scores(rng: &mut ChaCha8Rng, len: usize, grid: u32) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(0..grid) as f64 / grid as f64).collect()
    }

    #[test]
    fn auc_perfect_separation_and_ties() {
        assert_eq!(auc(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auc(&[0.8, 0.9], &[0.1, 0.2]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.5);
        assert!(auc(&[], &[1.0]).is_err());
        assert!(auc(&[1.0], &[f64::NAN]).is_err());
    }

    #[test]
    fn auc_complement_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (ln, la) = (1 + rng.gen_range(0..20), 1 + rng.gen_range(0..20));
            let n = rand_scores(&mut rng, ln, 8);
            let a = rand_scores(&mut rng, la, 8);
            let fwd = auc(&n, &a).unwrap();
            let rev = auc(&a, &n).unwrap();
            assert_eq!(fwd + rev, 1.0);
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        // Integer-valued scores keep ties exact through x -> x^2 + 3.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n: Vec<f64> = (0..12).map(|_| rng.gen_range(0..15) as f64).collect();
            let a: Vec<f64> = (0..9).map(|_| rng.gen_range(0..15) as f64).collect();
            let tn: Vec<f64> = n.iter().map(|x| x * x + 3.0).collect();
            let ta: Vec<f64> = a.iter().map(|x| x * x + 3.0).collect();
            assert_eq!(auc(&n, &a).unwrap(), auc(&tn, &ta).unwrap());
        }
    }

    #[test]
    fn pairwise_and_trapezoid_agree_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..300 {
            let (ln, la) = (1 + rng.gen_range(0..50), 1 + rng.gen_range(0..50));
            let n = rand_scores(&mut rng, ln, 6);
            let a = rand_scores(&mut rng, la, 6);
            let p = auc(&n, &a).unwrap();
            let t = auc_trapezoid(&n, &a).unwrap();
            assert_eq!(p.to_bits(), t.to_bits(), "case {case}");
        }
    }

    #[test]
    fn roc_endpoints_and_monotonicity() {
        let n = [0.1, 0.5, 0.5, 0.9];
        let a = [0.5, 0.7];
        let pts = roc_counts(&n, &a).unwrap();
        assert_eq!(*pts.first().unwrap(), (0, 0));
        assert_eq!(*pts.last().unwrap(), (4, 2));
        for w in pts.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            assert!(w[1] != w[0]);
        }
        // Descending values: 0.9 (normal), 0.7 (anomaly), 0.5 (tie group), 0.1.
        assert_eq!(pts, vec![(0, 0), (1, 0), (1, 1), (3, 2), (4, 2)]);
    }

    #[test]
    fn pauc_full_range_equals_auc_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (ln, la) = (1 + rng.gen_range(0..30), 1 + rng.gen_range(0..30));
            let n = rand_scores(&mut rng, ln, 5);
            let a = rand_scores(&mut rng, la, 5);
            assert_eq!(
                pauc(&n, &a, 1.0).unwrap().to_bits(),
                auc(&n, &a).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn pauc_perfect_separation_is_one_for_any_p() {
        let n = [0.0, 0.1, 0.2];
        let a = [0.8, 0.9];
        for p in [0.05, 0.1, 0.37, 1.0] {
            assert!((pauc(&n, &a, p).unwrap() - 1.0).abs() < 1e-15, "p={p}");
        }
        assert!(pauc(&n, &a, 0.0).is_err());
        assert!(pauc(&n, &a, 1.5).is_err());
        assert!(pauc(&n, &a, -0.1).is_err());
    }

    /// Threshold-enumeration partial-AUC oracle: builds the step ROC from
    /// scratch and clips the area geometrically.
    fn pauc_oracle(normals: &[f64], anomalies: &[f64], p: f64) -> f64 {
        let mut values: Vec<f64> = normals.iter().chain(anomalies).copied().collect();
        values.sort_by(|a, b| b.partial_cmp(a).unwrap());
        values.dedup();
        let n = normals.len() as f64;
        let m = anomalies.len() as f64;
        // ROC vertices for thresholds "score >= v", plus the origin.
        let mut verts = vec![(0.0f64, 0.0f64)];
        for &v in &values {
            let fpr = normals.iter().filter(|&&s| s >= v).count() as f64 / n;
            let tpr = anomalies.iter().filter(|&&s| s >= v).count() as f64 / m;
            verts.push((fpr, tpr));
        }
        let mut area = 0.0;
        for w in verts.windows(2) {
            let (x0, y0) = w[0];
            let (x1, y1) = w[1];
            if x1 <= p {
                area += (x1 - x0) * (y0 + y1) / 2.0;
            } else if x0 < p {
                let t = (p - x0) / (x1 - x0);
                let y_p = y0 + t * (y1 - y0);
                area += (p - x0) * (y0 + y_p) / 2.0;
                break;
            } else {
                break;
            }
        }
        area / p
    }

    #[test]
    fn pauc_matches_threshold_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..200 {
            let (ln, la) = (2 + rng.gen_range(0..38), 2 + rng.gen_range(0..38));
            let n = rand_scores(&mut rng, ln, 7);
            let a = rand_scores(&mut rng, la, 7);
            for p in [0.1, 0.25, 0.6] {
                let got = pauc(&n, &a, p).unwrap();
                let want = pauc_oracle(&n, &a, p);
                assert!((got - want).abs() <= 1e-12, "case {case} p {p}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn mcclish_pins_chance_at_half_and_perfect_at_one() {
        // All scores equal: the ROC is the diagonal, chance performance.
        let flat_n = [0.4, 0.4, 0.4];
        let flat_a = [0.4, 0.4];
        assert!((pauc_mcclish(&flat_n, &flat_a, 0.1).unwrap() - 0.5).abs() < 1e-12);
        let n = [0.0, 0.1];
        let a = [0.9, 1.0];
        assert!((pauc_mcclish(&n, &a, 0.1).unwrap() - 1.0).abs() < 1e-12);
    }

    fn row(score: f64, label: Label, domain: Domain) -> LabeledScore {
        LabeledScore { score, label, domain }
    }

    #[test]
    fn domain_auc_selects_normals_by_domain_only() {
        let rows = vec![
            row(0.1, Label::Normal, Domain::Source),
            row(0.3, Label::Normal, Domain::Target),
            row(0.8, Label::Anomaly, Domain::Source),
            row(0.2, Label::Anomaly, Domain::Target),
        ];
        // Source normals {0.1} vs anomalies {0.8, 0.2}: both pairs won.
        assert_eq!(domain_auc(&rows, Domain::Source).unwrap(), 1.0);
        // Target normals {0.3} vs the same anomalies: one win, one loss.
        assert_eq!(domain_auc(&rows, Domain::Target).unwrap(), 0.5);

        let single: Vec<LabeledScore> = rows
            .iter()
            .filter(|r| r.domain == Domain::Source)
            .copied()
            .collect();
        let all_scores_n: Vec<f64> = single
            .iter()
            .filter(|r| r.label == Label::Normal)
            .map(|r| r.score)
            .collect();
        let all_scores_a: Vec<f64> = single
            .iter()
            .filter(|r| r.label == Label::Anomaly)
            .map(|r| r.score)
            .collect();
        assert_eq!(
            domain_auc(&single, Domain::Source).unwrap(),
            auc(&all_scores_n, &all_scores_a).unwrap()
        );
        assert!(matches!(
            domain_auc(&single, Domain::Target),
            Err(Error::MissingDomain { .. })
        ));
    }

    #[test]
    fn domain_auc_matches_restricted_pair_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let mut rows = Vec::new();
            for _ in 0..rng.gen_range(2..20) {
                let domain = if rng.gen_bool(0.7) { Domain::Source } else { Domain::Target };
                let label = if rng.gen_bool(0.5) { Label::Normal } else { Label::Anomaly };
                rows.push(row(rng.gen_range(0..10) as f64, label, domain));
            }
            for d in Domain::ALL {
                let normals: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.label == Label::Normal && r.domain == d)
                    .map(|r| r.score)
                    .collect();
                let anomalies: Vec<f64> =
                    rows.iter().filter(|r| r.label == Label::Anomaly).map(|r| r.score).collect();
                if normals.is_empty() || anomalies.is_empty() {
                    assert!(domain_auc(&rows, d).is_err());
                    continue;
                }
                let mut num = 0.0;
                for &a in &anomalies {
                    for &b in &normals {
                        num += if a > b {
                            1.0
                        } else if a == b {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
                let want = num / (normals.len() * anomalies.len()) as f64;
                assert!((domain_auc(&rows, d).unwrap() - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hmean_reproduces_published_table_rows() {
        assert!((hmean(&[65.48, 74.42]).unwrap() - 69.66).abs() <= 0.01);
        let seven = [67.67, 71.18, 82.87, 71.73, 95.97, 68.52, 98.18];
        assert!((hmean(&seven).unwrap() - 77.75).abs() <= 0.01);
    }

    #[test]
    fn hmean_basics() {
        assert!((hmean(&[0.3, 0.3, 0.3]).unwrap() - 0.3).abs() < 1e-15);
        assert!(matches!(hmean(&[1.0, 0.0]), Err(Error::NonPositiveHmeanInput(_))));
        assert!(matches!(hmean(&[1.0, -2.0]), Err(Error::NonPositiveHmeanInput(_))));
        assert!(hmean(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..5).map(|_| rng.gen_range(0.1..1.0)).collect();
            let h = hmean(&vals).unwrap();
            let am = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(h <= am + 1e-12);
        }
    }

    fn report(machine: &str, s: f64, t: f64, p: f64) -> MachineReport {
        MachineReport { machine: machine.into(), auc_source: s, auc_target: t, pauc: p }
    }

    #[test]
    fn official_score_flattens_machines_and_metrics() {
        let one = vec![report("m", 0.7, 0.7, 0.7)];
        assert!((official_score(&one).unwrap() - 0.7).abs() < 1e-15);
        let two = vec![report("a", 1.0, 1.0, 1.0), report("b", 0.5, 0.5, 0.5)];
        assert!((official_score(&two).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let swapped = vec![two[1].clone(), two[0].clone()];
        assert_eq!(official_score(&two).unwrap(), official_score(&swapped).unwrap());
    }

    #[test]
    fn evaluate_builds_per_machine_reports() {
        let mut map = BTreeMap::new();
        map.insert(
            "fan".to_string(),
            vec![
                row(0.1, Label::Normal, Domain::Source),
                row(0.2, Label::Normal, Domain::Target),
                row(0.8, Label::Anomaly, Domain::Source),
                row(0.9, Label::Anomaly, Domain::Target),
            ],
        );
        map.insert(
            "pump".to_string(),
            vec![
                row(0.5, Label::Normal, Domain::Source),
                row(0.5, Label::Normal, Domain::Target),
                row(0.5, Label::Anomaly, Domain::Source),
                row(0.5, Label::Anomaly, Domain::Target),
            ],
        );
        let rep = evaluate(&map, 0.1, false).unwrap();
        assert_eq!(rep.machines.len(), 2);
        assert_eq!(rep.machines[0].machine, "fan");
        assert_eq!(rep.machines[0].auc_source, 1.0);
        assert_eq!(rep.machines[1].auc_source, 0.5);
        // All-tied scores trace the diagonal ROC, whose clipped area is
        // p^2/2; normalized by p that is p/2.
        assert!((rep.machines[1].pauc - 0.05).abs() < 1e-12);
        let expect = hmean(&[1.0, 1.0, 1.0, 0.5, 0.5, 0.05]).unwrap();
        assert!((rep.official - expect).abs() < 1e-12);

        let text = rep.render_text();
        assert!(text.contains("fan") && text.contains("official score"));
        assert!(text.contains("100.00"));
        let csv = rep.render_csv().unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("ALL,"));
        let jsonl = rep.render_jsonl().unwrap();
        for line in jsonl.lines() {
            serde_json::from_str::<serde_json::Value>(line).unwrap();
        }
    }

    #[test]
    fn unknown_labels_are_rejected() {
        let mut map = BTreeMap::new();
        map.insert(
            "fan".to_string(),
            vec![row(0.1, Label::Unknown, Domain::Source)],
        );
        assert!(matches!(evaluate(&map, 0.1, false), Err(Error::MissingLabels(_))));
    }
}
