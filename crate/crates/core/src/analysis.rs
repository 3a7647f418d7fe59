//! Latent diagnostics (bit allocation, power spectrum) and rate-quality
//! curve comparison with Bjontegaard deltas.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::write_gray;
use crate::error::{Error, Result};
use crate::fft::{fft2, fftshift2};

/// Channel mean of per-element bits at each latent location.
pub fn bit_allocation_map(bits: &Array3<f64>) -> Result<Array2<f64>> {
    if bits.is_empty() {
        return Err(Error::Input("empty bits array".into()));
    }
    Ok(bits.mean_axis(Axis(0)).expect("non-empty"))
}

/// Channel-mean DFT magnitude of a latent with zero frequency at the centre.
/// `log` applies `ln(1 + v)` for display.
pub fn psd_map(y_hat: &Array3<f64>, log: bool) -> Result<Array2<f64>> {
    if y_hat.is_empty() {
        return Err(Error::Input("empty latent".into()));
    }
    let spec = fft2(y_hat.view());
    let mag = spec.mapv(|z| z.norm()).mean_axis(Axis(0)).expect("non-empty");
    let shifted = fftshift2(&mag);
    Ok(if log { shifted.mapv(f64::ln_1p) } else { shifted })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
}

/// At least four points with strictly increasing positive rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    pub label: String,
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    /// Sorts by rate and validates.
    pub fn new(label: impl Into<String>, mut points: Vec<RdPoint>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::Input(format!(
                "an RD curve needs at least 4 points, got {}",
                points.len()
            )));
        }
        if points
            .iter()
            .any(|p| !(p.bpp > 0.0) || !p.bpp.is_finite() || !p.quality.is_finite())
        {
            return Err(Error::Input(
                "RD points need positive finite rate and finite quality".into(),
            ));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[1].bpp <= w[0].bpp) {
            return Err(Error::Input("RD curve rates must be distinct".into()));
        }
        Ok(RdCurve {
            label: label.into(),
            points,
        })
    }

    fn log_rates(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.bpp.log2()).collect()
    }

    fn qualities(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.quality).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BdMode {
    /// Average rate change (percent) at equal quality.
    BdRate,
    /// Average quality change at equal rate.
    BdQuality,
}

impl std::fmt::Display for BdMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BdMode::BdRate => "bd_rate",
            BdMode::BdQuality => "bd_quality",
        })
    }
}

/// Which interpolant produced a result.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fit {
    Cubic,
    Pchip,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BdResult {
    pub mode: BdMode,
    /// Percent for [`BdMode::BdRate`], quality units otherwise.
    pub value: f64,
    pub overlap_lo: f64,
    pub overlap_hi: f64,
    pub fit: Fit,
}

/// Least-squares cubic through `(x, y)`, returned as an integrable closure
/// over the original abscissa. `x` is affinely mapped to `[-1, 1]` first.
struct Cubic {
    coef: [f64; 4],
    center: f64,
    half: f64,
}

impl Cubic {
    fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let center = 0.5 * (lo + hi);
        let half = (0.5 * (hi - lo)).max(f64::MIN_POSITIVE);
        let mut ata = [[0.0; 4]; 4];
        let mut atb = [0.0; 4];
        for (&xi, &yi) in x.iter().zip(y) {
            let t = (xi - center) / half;
            let pw = [1.0, t, t * t, t * t * t];
            for r in 0..4 {
                atb[r] += pw[r] * yi;
                for c in 0..4 {
                    ata[r][c] += pw[r] * pw[c];
                }
            }
        }
        let coef = solve4(ata, atb).ok_or_else(|| Error::Metric("degenerate points for a cubic fit".into()))?;
        Ok(Cubic { coef, center, half })
    }

    fn t(&self, x: f64) -> f64 {
        (x - self.center) / self.half
    }

    fn derivative(&self, x: f64) -> f64 {
        let t = self.t(x);
        let c = &self.coef;
        (c[1] + 2.0 * c[2] * t + 3.0 * c[3] * t * t) / self.half
    }

    /// Exact integral over `[a, b]`.
    fn integral(&self, a: f64, b: f64) -> f64 {
        let anti = |t: f64| {
            let c = &self.coef;
            c[0] * t + c[1] * t * t / 2.0 + c[2] * t.powi(3) / 3.0 + c[3] * t.powi(4) / 4.0
        };
        (anti(self.t(b)) - anti(self.t(a))) * self.half
    }

    /// Whether the fit is monotone (same sign as the data trend) on `[a, b]`.
    fn monotone_on(&self, a: f64, b: f64, increasing: bool) -> bool {
        (0..=64).all(|k| {
            let d = self.derivative(a + (b - a) * k as f64 / 64.0);
            if increasing {
                d >= 0.0
            } else {
                d <= 0.0
            }
        })
    }
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..4 {
            let f = a[r][col] / a[col][col];
            for c in col..4 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch-Carlson slopes).
struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        // sort by x and average duplicates
        let mut pts: Vec<(f64, f64)> = x.iter().cloned().zip(y.iter().cloned()).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        for (px, py) in pts {
            if xs.last() == Some(&px) {
                let k = ys.len() - 1;
                ys[k] += py;
                counts[k] += 1.0;
            } else {
                xs.push(px);
                ys.push(py);
                counts.push(1.0);
            }
        }
        for (y, c) in ys.iter_mut().zip(&counts) {
            *y /= c;
        }
        let n = xs.len();
        if n < 2 {
            return Err(Error::Metric("need two distinct abscissae for interpolation".into()));
        }
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let del: Vec<f64> = (0..n - 1).map(|k| (ys[k + 1] - ys[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d = vec![del[0]; 2];
        } else {
            for k in 1..n - 1 {
                if del[k - 1] * del[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / del[k - 1] + w2 / del[k]);
                }
            }
            d[0] = end_slope(h[0], h[1], del[0], del[1]);
            d[n - 1] = end_slope(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
        }
        Ok(Pchip { x: xs, y: ys, d })
    }

    fn eval(&self, v: f64) -> f64 {
        let n = self.x.len();
        let k = self.x.partition_point(|&xi| xi <= v).clamp(1, n - 1) - 1;
        let h = self.x[k + 1] - self.x[k];
        let t = (v - self.x[k]) / h;
        let (t2, t3) = (t * t, t * t * t);
        (2.0 * t3 - 3.0 * t2 + 1.0) * self.y[k]
            + (t3 - 2.0 * t2 + t) * h * self.d[k]
            + (-2.0 * t3 + 3.0 * t2) * self.y[k + 1]
            + (t3 - t2) * h * self.d[k + 1]
    }

    /// Integral over `[a, b]` by Simpson's rule on each piece (exact for
    /// cubics).
    fn integral(&self, a: f64, b: f64) -> f64 {
        let mut knots = vec![a];
        knots.extend(self.x.iter().cloned().filter(|&x| x > a && x < b));
        knots.push(b);
        knots
            .windows(2)
            .map(|w| (w[1] - w[0]) / 6.0 * (self.eval(w[0]) + 4.0 * self.eval(0.5 * (w[0] + w[1])) + self.eval(w[1])))
            .sum()
    }
}

fn end_slope(h0: f64, h1: f64, del0: f64, del1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * del0 - h0 * del1) / (h0 + h1);
    if d.signum() != del0.signum() {
        0.0
    } else if del0.signum() != del1.signum() && d.abs() > 3.0 * del0.abs() {
        3.0 * del0
    } else {
        d
    }
}

/// Average of `fit_test - fit_anchor` over the overlap of the abscissae.
/// Uses least-squares cubics unless either is degenerate or non-monotone on
/// the overlap, in which case both curves switch to PCHIP.
fn average_gap(xa: &[f64], ya: &[f64], xt: &[f64], yt: &[f64]) -> Result<(f64, f64, f64, Fit)> {
    let range = |v: &[f64]| {
        (
            v.iter().cloned().fold(f64::INFINITY, f64::min),
            v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let (la, ha) = range(xa);
    let (lt, ht) = range(xt);
    let (lo, hi) = (la.max(lt), ha.min(ht));
    if !(hi > lo) {
        return Err(Error::Metric(format!(
            "curves do not overlap: anchor [{la}, {ha}], test [{lt}, {ht}]"
        )));
    }
    let trend = |x: &[f64], y: &[f64]| {
        let (imin, imax) = (0..x.len()).fold((0, 0), |(a, b), i| {
            (if x[i] < x[a] { i } else { a }, if x[i] > x[b] { i } else { b })
        });
        y[imax] >= y[imin]
    };
    // repeated abscissae (saturated quality) can leave the cubic underdetermined
    if let (Ok(ca), Ok(ct)) = (Cubic::fit(xa, ya), Cubic::fit(xt, yt)) {
        if ca.monotone_on(lo, hi, trend(xa, ya)) && ct.monotone_on(lo, hi, trend(xt, yt)) {
            let gap = (ct.integral(lo, hi) - ca.integral(lo, hi)) / (hi - lo);
            return Ok((gap, lo, hi, Fit::Cubic));
        }
    }
    let pa = Pchip::new(xa, ya)?;
    let pt = Pchip::new(xt, yt)?;
    Ok((
        (pt.integral(lo, hi) - pa.integral(lo, hi)) / (hi - lo),
        lo,
        hi,
        Fit::Pchip,
    ))
}

/// Bjontegaard delta of `test` against `anchor`. Negative BD-rate means the
/// test curve needs fewer bits for the same quality.
pub fn bd_metric(anchor: &RdCurve, test: &RdCurve, mode: BdMode) -> Result<BdResult> {
    for c in [anchor, test] {
        if c.points.len() < 4 {
            return Err(Error::Input(format!("curve {:?} has fewer than 4 points", c.label)));
        }
    }
    let (ra, qa, rt, qt) = (
        anchor.log_rates(),
        anchor.qualities(),
        test.log_rates(),
        test.qualities(),
    );
    Ok(match mode {
        BdMode::BdRate => {
            let (gap, lo, hi, fit) = average_gap(&qa, &ra, &qt, &rt)?;
            BdResult {
                mode,
                value: (gap.exp2() - 1.0) * 100.0,
                overlap_lo: lo,
                overlap_hi: hi,
                fit,
            }
        }
        BdMode::BdQuality => {
            let (gap, lo, hi, fit) = average_gap(&ra, &qa, &rt, &qt)?;
            BdResult {
                mode,
                value: gap,
                overlap_lo: lo.exp2(),
                overlap_hi: hi.exp2(),
                fit,
            }
        }
    })
}

/// One row of a BD report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BdRow {
    pub anchor: String,
    pub test: String,
    pub result: BdResult,
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

pub fn curve_csv(curve: &RdCurve) -> String {
    let mut s = String::from("bpp,quality\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{}", p.bpp, p.quality);
    }
    s
}

pub fn bd_csv(rows: &[BdRow]) -> String {
    let mut s = String::from("anchor,test,mode,value,overlap_lo,overlap_hi\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.anchor, r.test, r.result.mode, r.result.value, r.result.overlap_lo, r.result.overlap_hi
        );
    }
    s
}

/// Line plot of quality against rate for every curve.
pub fn curves_svg(curves: &[RdCurve], quality_label: &str) -> String {
    let (w, h, m) = (480.0, 360.0, 48.0);
    let pts = curves.iter().flat_map(|c| c.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p.bpp);
        x1 = x1.max(p.bpp);
        y0 = y0.min(p.quality);
        y1 = y1.max(p.quality);
    }
    let sx = |v: f64| m + (v - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * m);
    let sy = |v: f64| h - m - (v - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * m);
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<path d=\"M{m} {m} V{} H{}\" stroke=\"black\" fill=\"none\"/>",
        h - m,
        w - m
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">bpp ({x0:.3} to {x1:.3})</text>",
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        "<text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">{quality_label} ({y0:.2} to {y1:.2})</text>",
        h / 2.0,
        h / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = palette[i % palette.len()];
        let path: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.bpp), sy(p.quality)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" stroke=\"{color}\" fill=\"none\" stroke-width=\"1.5\"/>",
            path.join(" ")
        );
        for p in &c.points {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>",
                sx(p.bpp),
                sy(p.quality)
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            m + 8.0,
            m + 14.0 * (i as f64 + 1.0),
            c.label
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Heat-map rendering of a 2-D map.
pub fn map_svg(map: &Array2<f64>) -> String {
    let (h, w) = map.dim();
    let cell = 16.0;
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n",
        w as f64 * cell,
        h as f64 * cell
    );
    for ((i, j), &v) in map.indexed_iter() {
        let g = (((v - lo) / span) * 255.0).round() as u8;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({g},{g},{g})\"/>",
            j as f64 * cell,
            i as f64 * cell
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes curve CSVs, a BD table, a curve plot and each named map as PNG and
/// SVG. Returns the written paths in creation order.
pub fn emit_reports(
    curves: &[RdCurve],
    bd_rows: &[BdRow],
    maps: &[(String, Array2<f64>)],
    quality_label: &str,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = out_dir.join(name);
        std::fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    for c in curves {
        put(format!("curve_{}.csv", file_stem(&c.label)), curve_csv(c))?;
    }
    if !bd_rows.is_empty() {
        put("bd_report.csv".into(), bd_csv(bd_rows))?;
    }
    if !curves.is_empty() {
        put("rd_curves.svg".into(), curves_svg(curves, quality_label))?;
    }
    for (name, m) in maps {
        put(format!("map_{}.svg", file_stem(name)), map_svg(m))?;
    }
    for (name, m) in maps {
        let p = out_dir.join(format!("map_{}.png", file_stem(name)));
        write_gray(&p, m)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(label: &str, pts: &[(f64, f64)]) -> RdCurve {
        RdCurve::new(
            label,
            pts.iter().map(|&(bpp, quality)| RdPoint { bpp, quality }).collect(),
        )
        .unwrap()
    }

    fn anchor() -> RdCurve {
        curve("a", &[(0.1, 30.0), (0.2, 33.0), (0.4, 35.5), (0.8, 37.0), (1.6, 38.0)])
    }

    #[test]
    fn bit_map_arithmetic() {
        let bits = Array3::from_shape_vec((2, 1, 1), vec![2.0, 1.0]).unwrap();
        assert_eq!(bit_allocation_map(&bits).unwrap()[[0, 0]], 1.5);
        let ones = Array3::from_elem((3, 2, 2), 1.0);
        assert!(bit_allocation_map(&ones).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn psd_constant_and_zero() {
        let c = Array3::from_elem((2, 4, 6), 3.0);
        let m = psd_map(&c, false).unwrap();
        assert!((m[[2, 3]] - 72.0).abs() < 1e-9);
        assert_eq!(m.iter().filter(|v| v.abs() > 1e-9).count(), 1);
        assert!(psd_map(&Array3::zeros((1, 3, 3)), true)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn bd_identity_and_shifts() {
        let a = anchor();
        let r = bd_metric(&a, &a, BdMode::BdRate).unwrap();
        assert!(r.value.abs() < 1e-12);
        let halved = curve(
            "h",
            &a.points.iter().map(|p| (p.bpp / 2.0, p.quality)).collect::<Vec<_>>(),
        );
        assert!((bd_metric(&a, &halved, BdMode::BdRate).unwrap().value + 50.0).abs() < 1e-9);
        let up = curve(
            "u",
            &a.points.iter().map(|p| (p.bpp, p.quality + 2.0)).collect::<Vec<_>>(),
        );
        assert!((bd_metric(&a, &up, BdMode::BdQuality).unwrap().value - 2.0).abs() < 1e-9);
        // dominating curve gives negative BD-rate
        assert!(bd_metric(&a, &up, BdMode::BdRate).unwrap().value < 0.0);
    }

    #[test]
    fn bd_errors() {
        let a = anchor();
        let far = curve("f", &[(0.1, 50.0), (0.2, 51.0), (0.4, 52.0), (0.8, 53.0)]);
        assert!(matches!(bd_metric(&a, &far, BdMode::BdRate), Err(Error::Metric(_))));
        let short = RdCurve {
            label: "s".into(),
            points: a.points[..3].to_vec(),
        };
        assert!(matches!(bd_metric(&a, &short, BdMode::BdRate), Err(Error::Input(_))));
        assert!(RdCurve::new("x", a.points[..3].to_vec()).is_err());
    }

    #[test]
    fn pchip_guard_on_wiggly_curve() {
        let a = anchor();
        // a plateau followed by a jump makes the least-squares cubic overshoot
        let t = curve(
            "w",
            &[
                (0.1, 30.0),
                (0.15, 36.9),
                (0.2, 37.0),
                (0.4, 37.05),
                (0.8, 37.1),
                (1.6, 38.0),
            ],
        );
        let r = bd_metric(&a, &t, BdMode::BdRate).unwrap();
        assert_eq!(r.fit, Fit::Pchip);
        assert!(r.value < 0.0);
        let pc = Pchip::new(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 8.0, 27.0]).unwrap();
        assert!((pc.eval(1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn saturated_quality_falls_back_to_pchip() {
        let a = anchor();
        let t = curve("s", &[(0.1, 36.0), (0.2, 38.0), (0.4, 40.0), (0.8, 40.0)]);
        let r = bd_metric(&a, &t, BdMode::BdRate).unwrap();
        assert_eq!(r.fit, Fit::Pchip);
        assert!(r.value.is_finite());
    }

    #[test]
    fn reports_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = anchor();
        let rows = vec![BdRow {
            anchor: "a".into(),
            test: "a".into(),
            result: bd_metric(&a, &a, BdMode::BdRate).unwrap(),
        }];
        let maps = vec![(
            "bits".to_string(),
            Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64),
        )];
        let p1 = emit_reports(&[a.clone()], &rows, &maps, "PSNR", dir.path()).unwrap();
        let first: Vec<Vec<u8>> = p1.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let p2 = emit_reports(&[a], &rows, &maps, "PSNR", dir.path()).unwrap();
        assert_eq!(p1, p2);
        let second: Vec<Vec<u8>> = p2.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        let img = image::open(dir.path().join("map_bits.png")).unwrap();
        assert_eq!((img.width(), img.height()), (3, 2));
    }
}
