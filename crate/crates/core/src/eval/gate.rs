//! Pass/fail criteria over a benchmark report, shared by the acceptance
//! suite and the CLI gate.

use serde::{Deserialize, Serialize};

use super::pipeline::{Report, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Default)]
struct Gate {
    out: Vec<Criterion>,
}

impl Gate {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        self.out.push(Criterion {
            name: name.to_string(),
            pass,
            detail,
        });
    }
}

fn at(r: &Report, v: Variant, thr: f64) -> f64 {
    r.row(v).map_or(f64::NAN, |row| row.all.at(thr))
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

/// Benchmark ordering criteria; a missing variant row yields NaN and fails.
pub fn report_criteria(r: &Report) -> Vec<Criterion> {
    let mut g = Gate::default();
    let gate = &mut g;
    use Variant::*;
    let (a, med, mean, rnd) = (at(r, Auto4dSize, 0.9), at(r, SizeMedian, 0.9), at(r, SizeMean, 0.9), at(r, SizeRandom, 0.9));
    gate.record(
        "size ordering",
        a > med && med >= mean && mean > rnd && a - rnd >= 0.10,
        format!(
            "≥0.9 IoU: Auto4D(size) {} > median {} ≥ mean {} > random {}; Auto4D - random = {:.1} pp (need ≥ 10)",
            pct(a), pct(med), pct(mean), pct(rnd), 100.0 * (a - rnd)
        ),
    );

    let (c8, z8, c9, z9) = (at(r, Auto4dSize, 0.8), at(r, Auto4dSizeCenter, 0.8), at(r, Auto4dSize, 0.9), at(r, Auto4dSizeCenter, 0.9));
    gate.record(
        "corner-align superiority",
        c8 > z8 && c9 > z9,
        format!("corner vs center: {} vs {} at 0.8, {} vs {} at 0.9", pct(c8), pct(z8), pct(c9), pct(z9)),
    );

    let (init, full, size) = (at(r, Init, 0.9), at(r, Auto4dSizePath, 0.9), at(r, Auto4dSize, 0.9));
    gate.record(
        "end-to-end gain",
        full - init >= 0.05 && full >= size,
        format!(
            "≥0.9 IoU: init {} → Auto4D(size+path) {} (+{:.1} pp, need ≥ 5); Auto4D(size) {}",
            pct(init), pct(full), 100.0 * (full - init), pct(size)
        ),
    );

    let kal = at(r, Kalman, 0.9);
    let (k5, i5) = (at(r, Kalman, 0.5), at(r, Init, 0.5));
    gate.record(
        "kalman baseline ordering",
        kal - init < full - init,
        format!(
            "gain at 0.9: Kalman {:+.1} pp < Auto4D {:+.1} pp (Kalman at 0.5: {:+.1} pp)",
            100.0 * (kal - init), 100.0 * (full - init), 100.0 * (k5 - i5)
        ),
    );

    let part = |v: Variant| r.row(v).map_or((f64::NAN, f64::NAN), |row| (row.static_objects.at(0.9), row.moving_objects.at(0.9)));
    let (is, im) = part(Init);
    let (ss, sm) = part(Auto4dSize);
    let (fs, fm) = part(Auto4dSizePath);
    let (size_s, size_m) = (ss - is, sm - im);
    let (path_s, path_m) = (fs - ss, fm - sm);
    gate.record(
        "static/moving split ordering",
        size_s > size_m && path_m > path_s,
        format!(
            "size gain static {:+.1} > moving {:+.1} pp; path gain moving {:+.1} > static {:+.1} pp",
            100.0 * size_s, 100.0 * size_m, 100.0 * path_m, 100.0 * path_s
        ),
    );

    match &r.annotator {
        Some(an) => {
            let fragmented: Vec<_> = an.scenes.iter().filter(|s| s.links > 0).collect();
            let improved = fragmented.iter().filter(|s| s.second_pass.at(0.9) > s.first_pass.at(0.9)).count();
            let (f, s) = (an.first_pass.at(0.9), an.second_pass.at(0.9));
            gate.record(
                "annotator-loop non-regression",
                s >= f && !fragmented.is_empty() && 2 * improved >= fragmented.len(),
                format!(
                    "≥0.9 IoU {} → {} after linking; improved on {improved}/{} fragmented scenes",
                    pct(f), pct(s), fragmented.len()
                ),
            );
        }
        None => gate.record("annotator-loop non-regression", false, "annotator loop not run".into()),
    }
    g.out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_fails_every_criterion() {
        let r = Report {
            config_digest: String::new(),
            seed: 0,
            test_scenes: vec![],
            size_training: None,
            path_training: None,
            rows: vec![],
            scenes: vec![],
            annotator: None,
        };
        let c = report_criteria(&r);
        assert_eq!(c.len(), 6);
        assert!(c.iter().all(|c| !c.pass));
    }
}
