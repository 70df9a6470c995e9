//! Accuracy and loss curves as a standalone SVG.

use std::fmt::Write as _;

use leafnet::train::History;

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 44.0;
const TRAIN_COLOR: &str = "#1f77b4";
const VAL_COLOR: &str = "#ff7f0e";

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
}

/// Rounds a tick step to 1, 2 or 5 times a power of ten.
fn nice_step(span: f64, ticks: usize) -> f64 {
    let raw = span / ticks as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let m = raw / mag;
    let m = if m <= 1.0 {
        1.0
    } else if m <= 2.0 {
        2.0
    } else if m <= 5.0 {
        5.0
    } else {
        10.0
    };
    m * mag
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let step = nice_step(hi - lo, 5);
    let first = (lo / step).ceil() * step;
    (0..)
        .map(|i| first + i as f64 * step)
        .take_while(|v| *v <= hi + step * 1e-9)
        .collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn panel(out: &mut String, x0: f64, title: &str, series: &[Series], epochs: usize, y_range: Option<(f64, f64)>) {
    let finite: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .filter(|v| v.is_finite())
        .collect();
    let (mut lo, mut hi) = y_range.unwrap_or_else(|| {
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() {
            (lo.min(0.0), hi)
        } else {
            (0.0, 1.0)
        }
    });
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let (xmin, xmax) = (1.0, (epochs.max(2)) as f64);
    let pw = PANEL_W - MARGIN_L - MARGIN_R;
    let ph = PANEL_H - MARGIN_T - MARGIN_B;
    let yt = ticks(lo, hi);
    lo = lo.min(yt.first().copied().unwrap_or(lo));
    hi = hi.max(yt.last().copied().unwrap_or(hi));
    let sx = |x: f64| x0 + MARGIN_L + (x - xmin) / (xmax - xmin) * pw;
    let sy = |y: f64| MARGIN_T + (1.0 - (y - lo) / (hi - lo)) * ph;

    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{title}</text>"#,
        x0 + MARGIN_L + pw / 2.0
    );
    let _ = writeln!(
        out,
        r##"<rect x="{:.1}" y="{MARGIN_T}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##,
        x0 + MARGIN_L
    );
    for y in yt {
        let py = sy(y);
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"##,
            x0 + MARGIN_L,
            x0 + MARGIN_L + pw,
            x0 + MARGIN_L - 6.0,
            py + 4.0,
            fmt_tick(y)
        );
    }
    for x in ticks(xmin, xmax).into_iter().filter(|x| x.fract() == 0.0) {
        let px = sx(x);
        let _ = writeln!(
            out,
            r##"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="#444"/><text x="{px:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"##,
            MARGIN_T + ph,
            MARGIN_T + ph + 5.0,
            MARGIN_T + ph + 18.0,
            fmt_tick(x)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">epoch</text>"#,
        x0 + MARGIN_L + pw / 2.0,
        PANEL_H - 8.0
    );
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if pts.len() == 1 {
            let (cx, cy) = pts[0].split_once(',').expect("formatted pair");
            let _ = writeln!(out, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{}"/>"#, s.color);
        } else if !pts.is_empty() {
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
                s.color,
                pts.join(" ")
            );
        }
        let ly = MARGIN_T + 14.0 + 16.0 * i as f64;
        let lx = x0 + PANEL_W - MARGIN_R - 90.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}" stroke-width="2"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
            lx + 18.0,
            s.color,
            lx + 24.0,
            ly + 4.0,
            s.label
        );
    }
}

/// Two panels: accuracy and loss against epoch, train and validation.
pub fn curves_svg(history: &History) -> String {
    let rec = &history.records;
    let epochs = rec.len();
    let pick = |f: &dyn Fn(&leafnet::train::EpochRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        rec.iter()
            .filter_map(|r| f(r).map(|v| (r.epoch as f64, v)))
            .collect()
    };
    let acc = [
        Series {
            label: "train",
            color: TRAIN_COLOR,
            points: pick(&|r| Some(r.train_acc)),
        },
        Series {
            label: "validation",
            color: VAL_COLOR,
            points: pick(&|r| r.val_acc),
        },
    ];
    let loss = [
        Series {
            label: "train",
            color: TRAIN_COLOR,
            points: pick(&|r| Some(r.train_loss)),
        },
        Series {
            label: "validation",
            color: VAL_COLOR,
            points: pick(&|r| r.val_loss),
        },
    ];
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">
<rect width="100%" height="100%" fill="white"/>
"#,
        w = 2.0 * PANEL_W,
        h = PANEL_H
    );
    panel(&mut out, 0.0, "Accuracy", &acc, epochs, Some((0.0, 1.0)));
    panel(&mut out, PANEL_W, "Loss", &loss, epochs, None);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use leafnet::train::EpochRecord;

    fn record(epoch: usize, val: bool) -> EpochRecord {
        EpochRecord {
            epoch,
            train_loss: 1.0 / epoch as f64,
            train_acc: 0.5,
            val_loss: val.then_some(0.7),
            val_acc: val.then_some(0.4),
            lr: 0.001,
            seconds: 0.0,
            steps: 1,
        }
    }

    #[test]
    fn polylines_per_series() {
        let h = History {
            records: (1..=4).map(|e| record(e, true)).collect(),
            ..History::default()
        };
        let svg = curves_svg(&h);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn single_epoch_without_validation_draws_points() {
        let h = History {
            records: vec![record(1, false)],
            ..History::default()
        };
        let svg = curves_svg(&h);
        assert_eq!(svg.matches("<circle").count(), 2);
        assert_eq!(svg.matches("<polyline").count(), 0);
    }

    #[test]
    fn tick_steps_are_round() {
        assert_eq!(nice_step(1.0, 5), 0.2);
        assert_eq!(nice_step(97.0, 5), 20.0);
        assert_eq!(ticks(0.0, 1.0).len(), 6);
    }
}
