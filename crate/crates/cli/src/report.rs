//! SVG line plots of accuracy and fidelity against sparsity.

use std::collections::BTreeMap;

use cfgx::eval::{FidelityRecord, SweepRow};
use cfgx::extract::Extraction;
use plotters::prelude::*;

use crate::error::{CliError, Result};
use crate::store::Store;

pub type Series = Vec<(String, Vec<(f64, f64)>)>;

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

/// Render one chart to an SVG string.
pub fn line_chart(title: &str, y_label: &str, series: &Series) -> Result<String> {
    let points = series.iter().flat_map(|(_, pts)| pts.iter());
    let (mut y_lo, mut y_hi) = points.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.1), hi.max(p.1))
    });
    if !y_lo.is_finite() {
        (y_lo, y_hi) = (0.0, 1.0);
    }
    let pad = ((y_hi - y_lo) * 0.05).max(0.01);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 480)).into_drawing_area();
        let err = |e: &dyn std::fmt::Display| CliError::format(title, e);
        root.fill(&WHITE).map_err(|e| err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d(0.0..100.0, (y_lo - pad)..(y_hi + pad))
            .map_err(|e| err(&e))?;
        chart
            .configure_mesh()
            .x_desc("sparsity (% of edges kept)")
            .y_desc(y_label)
            .draw()
            .map_err(|e| err(&e))?;
        for (i, (name, pts)) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
                .map_err(|e| err(&e))?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
            chart
                .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(|e| err(&e))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .position(SeriesLabelPosition::LowerRight)
            .draw()
            .map_err(|e| err(&e))?;
        root.present().map_err(|e| err(&e))?;
    }
    Ok(svg)
}

/// Accuracy series per explainer for one extraction method, in first-seen
/// order.
pub fn sweep_series(rows: &[SweepRow], extraction: Extraction) -> Series {
    let mut out: Series = Vec::new();
    for r in rows.iter().filter(|r| r.extraction == extraction) {
        match out.iter_mut().find(|(n, _)| *n == r.explainer) {
            Some((_, pts)) => pts.push((r.sparsity, r.accuracy)),
            None => out.push((r.explainer.clone(), vec![(r.sparsity, r.accuracy)])),
        }
    }
    out
}

/// Mean Fidelity+ (`plus`) or Fidelity- per explainer and sparsity.
pub fn fidelity_series(rows: &[FidelityRecord], extraction: Extraction, plus: bool) -> Series {
    let mut acc: Vec<(String, BTreeMap<u64, (f64, f64, usize)>)> = Vec::new();
    for r in rows.iter().filter(|r| r.extraction == extraction) {
        let idx = match acc.iter().position(|(n, _)| *n == r.explainer) {
            Some(i) => i,
            None => {
                acc.push((r.explainer.clone(), BTreeMap::new()));
                acc.len() - 1
            }
        };
        let v = if plus { r.fid_plus } else { r.fid_minus };
        let e = acc[idx].1.entry(r.sparsity.to_bits()).or_insert((r.sparsity, 0.0, 0));
        e.1 += v;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(name, m)| {
            let mut pts: Vec<(f64, f64)> = m.into_values().map(|(s, sum, n)| (s, sum / n as f64)).collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (name, pts)
        })
        .collect()
}

fn stamp(store: &Store, svg: &str) -> String {
    let m = store.meta();
    let comment = format!(
        "<!-- cfgx {} config_hash={} seed={} version={} -->\n",
        m.command, m.config_hash, m.seed, m.version
    );
    match svg.find("?>") {
        Some(i) if svg.starts_with("<?xml") => format!("{}\n{}{}", &svg[..i + 2], comment, svg[i + 2..].trim_start()),
        _ => format!("{comment}{svg}"),
    }
}

/// Write every plot the available data supports; returns the file count.
pub fn write_all(store: &Store, sweep: &[SweepRow], fidelity: Option<&[FidelityRecord]>) -> Result<usize> {
    let mut written = 0;
    for ex in Extraction::ALL {
        let series = sweep_series(sweep, ex);
        if series.is_empty() {
            continue;
        }
        let svg = line_chart(&format!("Accuracy vs sparsity ({})", ex.as_str().to_uppercase()), "accuracy", &series)?;
        store.write(&format!("report/accuracy_{ex}.svg"), stamp(store, &svg).as_bytes())?;
        written += 1;
        if let Some(fid) = fidelity {
            for (plus, tag, label) in [(true, "plus", "Fidelity+"), (false, "minus", "Fidelity-")] {
                let series = fidelity_series(fid, ex, plus);
                if series.is_empty() {
                    continue;
                }
                let title = format!("{label} vs sparsity ({})", ex.as_str().to_uppercase());
                let svg = line_chart(&title, label, &series)?;
                store.write(&format!("report/fidelity_{tag}_{ex}.svg"), stamp(store, &svg).as_bytes())?;
                written += 1;
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, ex: Extraction, s: f64, a: f64) -> SweepRow {
        SweepRow {
            explainer: name.into(),
            extraction: ex,
            sparsity: s,
            accuracy: a,
        }
    }

    #[test]
    fn one_series_per_explainer() {
        let rows = vec![
            row("ig", Extraction::Gec, 5.0, 0.5),
            row("ig", Extraction::Gec, 10.0, 0.7),
            row("gbp", Extraction::Gec, 5.0, 0.6),
            row("ig", Extraction::Tes, 5.0, 0.1),
        ];
        let s = sweep_series(&rows, Extraction::Gec);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], ("ig".to_string(), vec![(5.0, 0.5), (10.0, 0.7)]));
    }

    #[test]
    fn fidelity_means() {
        let rec = |g: &str, fp: f64| FidelityRecord {
            graph_id: g.into(),
            explainer: "ig".into(),
            extraction: Extraction::Tes,
            sparsity: 10.0,
            k: 1,
            fid_plus: fp,
            fid_minus: 0.0,
        };
        let s = fidelity_series(&[rec("a", 0.2), rec("b", 0.4)], Extraction::Tes, true);
        assert_eq!(s.len(), 1);
        assert!((s[0].1[0].1 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn chart_has_a_path_per_series() {
        let series = vec![
            ("ig".to_string(), vec![(5.0, 0.5), (10.0, 0.7)]),
            ("gbp".to_string(), vec![(5.0, 0.6), (10.0, 0.65)]),
        ];
        let svg = line_chart("t", "accuracy", &series).unwrap();
        assert!(svg.contains("<svg"));
        assert!(svg.contains("\nig\n</text>") && svg.contains("\ngbp\n</text>"));
        assert!(svg.matches("<polyline").count() >= 2);
    }
}
