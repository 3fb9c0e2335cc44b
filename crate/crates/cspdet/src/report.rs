//! Evaluation reports: a JSON document and a fixed-width console table with
//! Model / BoxAP / MaskAP / mIoU columns.

use cspdet_core::metrics::{Counts, EvalResult};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub num_gt: usize,
    pub box_ap: Option<f64>,
    pub mask_ap: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl From<Counts> for CountReport {
    fn from(c: Counts) -> Self {
        Self { tp: c.tp, fp: c.fp, fn_: c.fn_ }
    }
}

/// Metrics are `null` when undefined (no ground truth, or for mIoU no detections).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub defined: bool,
    pub box_ap: Option<f64>,
    pub mask_ap: Option<f64>,
    pub box_ap50: Option<f64>,
    pub mask_ap50: Option<f64>,
    pub box_ap75: Option<f64>,
    pub mask_ap75: Option<f64>,
    pub miou: Option<f64>,
    /// AP at IoU 0.50, 0.55, …, 0.95.
    pub box_ap_per_threshold: Vec<f64>,
    pub mask_ap_per_threshold: Vec<f64>,
    pub per_class: Vec<ClassReport>,
    /// Mask matches at IoU 0.5.
    pub counts: CountReport,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_dets: usize,
}

impl EvalReport {
    pub fn new(model: &str, r: &EvalResult, class_names: &[String]) -> Self {
        let at = |v: &Vec<f64>, i: usize| v.get(i).copied();
        Self {
            model: model.to_string(),
            defined: r.is_defined(),
            box_ap: r.box_ap,
            mask_ap: r.mask_ap,
            box_ap50: at(&r.box_ap_per_threshold, 0),
            mask_ap50: at(&r.mask_ap_per_threshold, 0),
            box_ap75: at(&r.box_ap_per_threshold, 5),
            mask_ap75: at(&r.mask_ap_per_threshold, 5),
            miou: r.miou,
            box_ap_per_threshold: r.box_ap_per_threshold.clone(),
            mask_ap_per_threshold: r.mask_ap_per_threshold.clone(),
            per_class: r
                .per_class
                .iter()
                .map(|c| ClassReport {
                    class_id: c.class_id,
                    name: class_names.get(c.class_id - 1).cloned().unwrap_or_else(|| format!("class{}", c.class_id)),
                    num_gt: c.num_gt,
                    box_ap: c.box_ap,
                    mask_ap: c.mask_ap,
                })
                .collect(),
            counts: r.counts.into(),
            num_images: r.num_images,
            num_gt: r.num_gt,
            num_dets: r.num_dets,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// AP columns in percent with two decimals, mIoU with four.
    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
        let frac = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let w = self.model.len().max(5);
        let rule = format!("+{}+{}+{}+{}+{}+{}+", "-".repeat(w + 2), "-".repeat(8), "-".repeat(8), "-".repeat(8), "-".repeat(8), "-".repeat(8));
        let mut s = String::new();
        s.push_str(&rule);
        s.push('\n');
        s.push_str(&format!("| {:<w$} | {:>6} | {:>6} | {:>6} | {:>6} | {:>6} |\n", "Model", "BoxAP", "MaskAP", "mIoU", "AP50b", "AP50m"));
        s.push_str(&rule);
        s.push('\n');
        s.push_str(&format!(
            "| {:<w$} | {:>6} | {:>6} | {:>6} | {:>6} | {:>6} |\n",
            self.model,
            pct(self.box_ap),
            pct(self.mask_ap),
            frac(self.miou),
            pct(self.box_ap50),
            pct(self.mask_ap50)
        ));
        s.push_str(&rule);
        s.push('\n');
        s.push_str(&format!(
            "images {}  gt {}  dets {}  tp {}  fp {}  fn {}\n",
            self.num_images, self.num_gt, self.num_dets, self.counts.tp, self.counts.fp, self.counts.fn_
        ));
        s
    }
}

/// Numeric cells of the data row of [`EvalReport::table`], `None` for "n/a".
pub fn parse_table_row(table: &str) -> Option<Vec<Option<f64>>> {
    let row = table.lines().filter(|l| l.starts_with('|')).nth(1)?;
    let cells: Vec<&str> = row.trim_matches('|').split('|').map(str::trim).collect();
    Some(cells[1..].iter().map(|c| c.parse().ok()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use cspdet_core::metrics::ClassResult;

    fn sample() -> EvalResult {
        EvalResult {
            box_ap: Some(0.4381),
            mask_ap: Some(0.38329),
            box_ap_per_threshold: vec![0.7; 10],
            mask_ap_per_threshold: vec![0.65; 10],
            miou: Some(0.861234),
            per_class: vec![ClassResult { class_id: 1, num_gt: 3, box_ap: Some(0.4381), mask_ap: Some(0.38329) }],
            counts: Counts { tp: 2, fp: 1, fn_: 1 },
            num_images: 3,
            num_gt: 3,
            num_dets: 3,
        }
    }

    #[test]
    fn console_and_json_agree() {
        let r = EvalReport::new("B0", &sample(), &["cell".into()]);
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let cells = parse_table_row(&r.table()).unwrap();
        let round = |x: f64, d: i32| (x * 10f64.powi(d)).round() / 10f64.powi(d);
        assert_eq!(cells[0], Some(round(100.0 * back.box_ap.unwrap(), 2)));
        assert_eq!(cells[1], Some(round(100.0 * back.mask_ap.unwrap(), 2)));
        assert_eq!(cells[2], Some(round(back.miou.unwrap(), 4)));
        assert_eq!(cells[3], Some(round(100.0 * back.box_ap50.unwrap(), 2)));
    }

    #[test]
    fn undefined_metrics_print_as_na_and_null() {
        let r = EvalReport::new("x", &EvalResult::default(), &[]);
        assert!(!r.defined);
        assert!(r.to_json().contains("\"miou\": null"));
        assert_eq!(parse_table_row(&r.table()).unwrap()[0], None);
    }
}
