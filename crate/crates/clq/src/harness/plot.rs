//! Loss-curve and ablation plots rendered as plain SVG, plus the CSV
//! parsers they read.

use crate::error::{Error, Result};

use super::evaluate::ResultRow;

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub iter: usize,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_lqe: f64,
    pub l_total: f64,
    pub n_pos: usize,
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<LossRow>> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::Parse {
            line: 1,
            msg: "empty loss csv".into(),
        });
    };
    if header.trim() != super::train::LOSS_CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (ln0, line) in lines {
        let ln = ln0 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected 6 columns, got {}", fields.len()),
            });
        }
        let f = |i: usize| -> Result<f64> {
            let v: f64 = fields[i].trim().parse().map_err(|_| Error::Parse {
                line: ln,
                msg: format!("bad float {:?}", fields[i]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: ln,
                    msg: "non-finite loss".into(),
                });
            }
            Ok(v)
        };
        let u = |i: usize| -> Result<usize> {
            fields[i].trim().parse().map_err(|_| Error::Parse {
                line: ln,
                msg: format!("bad integer {:?}", fields[i]),
            })
        };
        out.push(LossRow {
            iter: u(0)?,
            l_cls: f(1)?,
            l_reg: f(2)?,
            l_lqe: f(3)?,
            l_total: f(4)?,
            n_pos: u(5)?,
        });
    }
    Ok(out)
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::Parse {
            line: 1,
            msg: "empty results csv".into(),
        });
    };
    if header.trim() != super::evaluate::RESULTS_CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (ln0, line) in lines {
        let ln = ln0 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected 11 columns, got {}", fields.len()),
            });
        }
        let f = |i: usize| -> Result<f64> {
            fields[i].trim().parse().map_err(|_| Error::Parse {
                line: ln,
                msg: format!("bad float {:?}", fields[i]),
            })
        };
        let b = |i: usize| -> Result<bool> {
            match fields[i].trim() {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(Error::Parse {
                    line: ln,
                    msg: format!("bad bool {other:?}"),
                }),
            }
        };
        out.push(ResultRow {
            run: fields[0].trim().to_string(),
            alpha: f(1)?,
            qfl: b(2)?,
            lqe: b(3)?,
            align: b(4)?,
            seed: fields[5].trim().parse().map_err(|_| Error::Parse {
                line: ln,
                msg: format!("bad seed {:?}", fields[5]),
            })?,
            ap: f(6)?,
            ap50: f(7)?,
            ap75: f(8)?,
            spearman: f(9)?,
            seconds: f(10)?,
        });
    }
    Ok(out)
}

fn svg_header(width: usize, height: usize) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    )
}

/// Loss curves over iterations, one polyline per component.
pub fn loss_curves_svg(rows: &[LossRow]) -> String {
    let (w, h) = (860usize, 420usize);
    let (ml, mr, mt, mb) = (60.0, 150.0, 20.0, 40.0);
    let plot_w = w as f64 - ml - mr;
    let plot_h = h as f64 - mt - mb;

    let mut svg = svg_header(w, h);
    if rows.is_empty() {
        svg.push_str("<text x=\"20\" y=\"40\">no loss rows</text>\n</svg>\n");
        return svg;
    }
    let max_iter = rows.last().map(|r| r.iter).unwrap_or(1).max(1) as f64;
    let max_loss = rows
        .iter()
        .map(|r| r.l_total)
        .fold(0.0f64, f64::max)
        .max(1e-9);

    type Series = (&'static str, &'static str, fn(&LossRow) -> f64);
    let series: [Series; 4] = [
        ("L_total", "#222222", |r| r.l_total),
        ("L_cls", "#d62728", |r| r.l_cls),
        ("L_reg", "#1f77b4", |r| r.l_reg),
        ("L_lqe", "#2ca02c", |r| r.l_lqe),
    ];
    for (i, (name, color, get)) in series.iter().enumerate() {
        let points: Vec<String> = rows
            .iter()
            .map(|r| {
                let x = ml + (r.iter as f64 / max_iter) * plot_w;
                let y = mt + (1.0 - get(r) / max_loss) * plot_h;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.4\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        let ly = mt + 16.0 * (i as f64 + 1.0);
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{ly:.1}\" fill=\"{color}\" font-size=\"13\">{name}</text>\n",
            w as f64 - mr + 12.0
        ));
    }
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        mt + plot_h,
        ml + plot_w,
        mt + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        mt + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{ml}\" y=\"{:.1}\" font-size=\"12\">0</text>\n",
        mt + plot_h + 16.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{}</text>\n",
        ml + plot_w - 30.0,
        mt + plot_h + 16.0,
        max_iter as usize
    ));
    svg.push_str(&format!(
        "<text x=\"8\" y=\"{mt}\" font-size=\"12\">{max_loss:.3}</text>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\">iteration</text>\n",
        ml + plot_w / 2.0 - 30.0,
        h as f64 - 8.0
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Mean-AP bars per run with whiskers over seeds.
pub fn ablation_bars_svg(rows: &[ResultRow]) -> String {
    let (w, h) = (720usize, 400usize);
    let (ml, mt, mb) = (70.0, 30.0, 70.0);
    let plot_h = h as f64 - mt - mb;

    let mut svg = svg_header(w, h);
    let mut runs: Vec<String> = Vec::new();
    for r in rows {
        if !runs.contains(&r.run) {
            runs.push(r.run.clone());
        }
    }
    if runs.is_empty() {
        svg.push_str("<text x=\"20\" y=\"40\">no result rows</text>\n</svg>\n");
        return svg;
    }
    let max_ap = rows.iter().map(|r| r.ap).fold(0.0f64, f64::max).max(1e-6);
    let band = (w as f64 - ml - 30.0) / runs.len() as f64;
    for (i, run) in runs.iter().enumerate() {
        let aps: Vec<f64> = rows.iter().filter(|r| &r.run == run).map(|r| r.ap).collect();
        let m = aps.iter().sum::<f64>() / aps.len() as f64;
        let lo = aps.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = aps.iter().cloned().fold(0.0f64, f64::max);
        let x = ml + band * i as f64 + band * 0.2;
        let bw = band * 0.6;
        let bar_h = (m / max_ap) * plot_h;
        let y = mt + plot_h - bar_h;
        svg.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bw:.1}\" height=\"{bar_h:.1}\" fill=\"#4c78a8\"/>\n"
        ));
        let cx = x + bw / 2.0;
        let y_lo = mt + plot_h - (lo / max_ap) * plot_h;
        let y_hi = mt + plot_h - (hi / max_ap) * plot_h;
        svg.push_str(&format!(
            "<line x1=\"{cx:.1}\" y1=\"{y_lo:.1}\" x2=\"{cx:.1}\" y2=\"{y_hi:.1}\" stroke=\"black\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"12\" transform=\"rotate(20 {x:.1} {:.1})\">{run}</text>\n",
            mt + plot_h + 18.0,
            mt + plot_h + 18.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"11\">{m:.3}</text>\n",
            y - 6.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"8\" y=\"{:.1}\" font-size=\"13\" transform=\"rotate(-90 14 {:.1})\">mean AP</text>\n",
        mt + plot_h / 2.0,
        mt + plot_h / 2.0
    ));
    svg.push_str("</svg>\n");
    svg
}
