//! Video metrics, the denoising-steps sweep and its plot.
//!
//! Every metric is a pure function of its inputs. Videos are `(T, H, W, 3)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.15;

fn check_video(v: &Tensor, what: &str) -> Result<(usize, usize)> {
    if v.rank() != 4 || v.dim(3) != 3 {
        return Err(Error::validation(what, format!("expected (T, H, W, 3), got {:?}", v.shape())));
    }
    Ok((v.dim(0), v.dim(1) * v.dim(2)))
}

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return Err(Error::validation("video", "empty tensor"));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// `exp` of the entropy of the empirical usage distribution.
pub fn codebook_perplexity(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::validation("usage_counts", "all counts are zero"));
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

/// Cosine similarity of each adjacent frame pair; `None` where a frame has
/// zero norm.
pub fn adjacent_cosines(video: &Tensor) -> Result<Vec<Option<f64>>> {
    let (t, _) = check_video(video, "video")?;
    if t < 2 {
        return Err(Error::validation("video", "need at least 2 frames"));
    }
    let n = video.numel() / t;
    let d = video.data();
    Ok((0..t - 1)
        .map(|f| {
            let (a, b) = (&d[f * n..(f + 1) * n], &d[(f + 1) * n..(f + 2) * n]);
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return None;
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            Some((dot / (na * nb)).clamp(-1.0, 1.0))
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flagged {
    pub value: f64,
    /// Pairs or frames left out of the mean.
    pub skipped: usize,
}

pub fn temporal_consistency_flagged(video: &Tensor) -> Result<Flagged> {
    let c = adjacent_cosines(video)?;
    let kept: Vec<f64> = c.iter().flatten().copied().collect();
    let skipped = c.len() - kept.len();
    if skipped > 0 {
        log::warn!("temporal_consistency skipped {skipped} zero-norm frame pairs");
    }
    let value = if kept.is_empty() { 0.0 } else { kept.iter().sum::<f64>() / kept.len() as f64 };
    Ok(Flagged { value, skipped })
}

/// Mean cosine similarity of adjacent flattened frames.
pub fn temporal_consistency(video: &Tensor) -> Result<f64> {
    Ok(temporal_consistency_flagged(video)?.value)
}

/// Mean absolute per-element difference between adjacent frames.
pub fn dynamic_degree(video: &Tensor) -> Result<f64> {
    let (t, _) = check_video(video, "video")?;
    if t < 2 {
        return Err(Error::validation("video", "need at least 2 frames"));
    }
    let n = video.numel() / t;
    let d = video.data();
    let total: f64 = (n..d.len()).map(|i| (d[i] - d[i - n]).abs()).sum();
    Ok(total / ((t - 1) * n) as f64)
}

pub fn luminance(rgb: &[f64]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Per-frame foreground masks: pixels whose luminance differs from the
/// frame's median luminance by more than `threshold`.
pub fn foreground_masks(video: &Tensor, threshold: f64) -> Result<Vec<Vec<bool>>> {
    let (t, hw) = check_video(video, "video")?;
    let d = video.data();
    Ok((0..t)
        .map(|f| {
            let lum: Vec<f64> = (0..hw).map(|p| luminance(&d[(f * hw + p) * 3..(f * hw + p) * 3 + 3])).collect();
            let mut sorted = lum.clone();
            sorted.sort_by(f64::total_cmp);
            let bg = sorted[sorted.len() / 2];
            lum.iter().map(|&l| (l - bg).abs() > threshold).collect()
        })
        .collect())
}

/// Mean IoU over frames where either mask is non-empty.
pub fn mask_iou(a: &[Vec<bool>], b: &[Vec<bool>]) -> Result<Flagged> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::validation("masks", "mask stacks differ in shape"));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for (x, y) in a.iter().zip(b) {
        let inter = x.iter().zip(y).filter(|(p, q)| **p && **q).count();
        let union = x.iter().zip(y).filter(|(p, q)| **p || **q).count();
        if union > 0 {
            sum += inter as f64 / union as f64;
            used += 1;
        }
    }
    let skipped = a.len() - used;
    if used == 0 {
        log::warn!("layout_iou: empty masks on all frames");
        return Ok(Flagged { value: 0.0, skipped });
    }
    Ok(Flagged {
        value: sum / used as f64,
        skipped,
    })
}

pub fn layout_iou_flagged(coarse: &Tensor, generated: &Tensor, threshold: f64) -> Result<Flagged> {
    if coarse.shape() != generated.shape() {
        return Err(Error::shape(coarse.shape(), generated.shape()));
    }
    mask_iou(&foreground_masks(coarse, threshold)?, &foreground_masks(generated, threshold)?)
}

/// Mean per-frame IoU of thresholded foreground masks.
pub fn layout_iou(coarse: &Tensor, generated: &Tensor, threshold: f64) -> Result<f64> {
    Ok(layout_iou_flagged(coarse, generated, threshold)?.value)
}

/// One-sided sign test p-value for "first exceeds second"; ties are dropped.
pub fn sign_test(pairs: &[(f64, f64)]) -> f64 {
    let wins = pairs.iter().filter(|(a, b)| a > b).count();
    let n = pairs.iter().filter(|(a, b)| a != b).count();
    if n == 0 {
        return 1.0;
    }
    // P(X ≥ wins) for X ~ Binomial(n, 1/2)
    let mut ln_choose = 0.0;
    let mut p = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            p += (ln_choose - n as f64 * 2f64.ln()).exp();
        }
    }
    p.min(1.0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub wall_clock_s: BTreeMap<String, f64>,
    pub flags: Vec<String>,
}

impl MetricReport {
    pub fn insert(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                stage: "eval".into(),
                diagnostics: format!("metric {name} = {value}"),
            });
        }
        self.metrics.insert(name.to_string(), value);
        Ok(())
    }
}

/// Metrics of one generated video against its coarse layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub layout_iou: f64,
    pub temporal_consistency: f64,
    pub dynamic_degree: f64,
}

impl SampleMetrics {
    pub fn compute(coarse: &Tensor, generated: &Tensor, threshold: f64) -> Result<Self> {
        Ok(SampleMetrics {
            layout_iou: layout_iou(coarse, generated, threshold)?,
            temporal_consistency: temporal_consistency(generated)?,
            dynamic_degree: dynamic_degree(generated)?,
        })
    }

    fn mean(all: &[SampleMetrics]) -> Self {
        let n = all.len().max(1) as f64;
        SampleMetrics {
            layout_iou: all.iter().map(|m| m.layout_iou).sum::<f64>() / n,
            temporal_consistency: all.iter().map(|m| m.temporal_consistency).sum::<f64>() / n,
            dynamic_degree: all.iter().map(|m| m.dynamic_degree).sum::<f64>() / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub injected: bool,
    pub samples: usize,
    pub mean: SampleMetrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

/// Runs `generate(steps, injected, case)` for every step count, condition and
/// case; it returns `(coarse layout video, generated video)`.
pub fn steps_sweep<C>(
    step_counts: &[usize],
    cases: &[C],
    threshold: f64,
    mut generate: impl FnMut(usize, bool, &C) -> Result<(Tensor, Tensor)>,
) -> Result<SweepTable> {
    if step_counts.is_empty() || cases.is_empty() {
        return Err(Error::validation("steps_sweep", "need step counts and at least one case"));
    }
    let mut rows = Vec::new();
    for &steps in step_counts {
        for injected in [true, false] {
            let ms = cases
                .iter()
                .map(|c| {
                    let (coarse, gen) = generate(steps, injected, c)?;
                    SampleMetrics::compute(&coarse, &gen, threshold)
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(SweepRow {
                steps,
                injected,
                samples: ms.len(),
                mean: SampleMetrics::mean(&ms),
            });
        }
    }
    Ok(SweepTable { rows })
}

impl SweepTable {
    pub fn get(&self, steps: usize, injected: bool) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.steps == steps && r.injected == injected)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("steps\tinjected\tsamples\tlayout_iou\ttemporal_consistency\tdynamic_degree\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                r.steps, r.injected, r.samples, r.mean.layout_iou, r.mean.temporal_consistency, r.mean.dynamic_degree
            );
        }
        s
    }

    /// Two panels (layout IoU, temporal consistency) against step count on a
    /// log axis, one line per condition.
    pub fn to_svg(&self) -> String {
        let (w, h) = (720.0, 320.0);
        let mut steps: Vec<usize> = self.rows.iter().map(|r| r.steps).collect();
        steps.sort_unstable();
        steps.dedup();
        let lx = |s: usize| (s as f64).ln();
        let (lo, hi) = (lx(steps[0]), lx(*steps.last().unwrap_or(&steps[0])));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        );
        let panels: [(&str, fn(&SampleMetrics) -> f64); 2] = [
            ("layout IoU", |m| m.layout_iou),
            ("temporal consistency", |m| m.temporal_consistency),
        ];
        for (pi, (title, get)) in panels.iter().enumerate() {
            let x0 = 50.0 + pi as f64 * 360.0;
            let (pw, ph, y0) = (280.0, 220.0, 40.0);
            let vals: Vec<f64> = self.rows.iter().map(|r| get(&r.mean)).collect();
            let vmin = vals.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
            let vmax = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(vmin + 1e-9);
            let px = |s: usize| x0 + (lx(s) - lo) / span * pw;
            let py = |v: f64| y0 + ph - (v - vmin) / (vmax - vmin) * ph;
            let _ = writeln!(out, "<text x=\"{}\" y=\"24\" font-size=\"13\">{title}</text>", x0);
            let _ = writeln!(
                out,
                "<rect x=\"{x0}\" y=\"{y0}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#888\"/>"
            );
            for &s in &steps {
                let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{s}</text>", px(s), y0 + ph + 16.0);
            }
            for (v, anchor) in [(vmin, y0 + ph), (vmax, y0)] {
                let _ = writeln!(out, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>", x0 - 4.0, anchor + 4.0);
            }
            for (injected, color) in [(true, "#d62728"), (false, "#1f77b4")] {
                let pts: Vec<String> = steps
                    .iter()
                    .filter_map(|&s| self.get(s, injected).map(|r| format!("{:.1},{:.1}", px(s), py(get(&r.mean)))))
                    .collect();
                let _ = writeln!(
                    out,
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
                    pts.join(" ")
                );
                for p in &pts {
                    let (cx, cy) = p.split_once(',').unwrap_or(("0", "0"));
                    let _ = writeln!(out, "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"3\" fill=\"{color}\"/>");
                }
            }
        }
        let _ = writeln!(
            out,
            "<text x=\"50\" y=\"{}\" fill=\"#d62728\">injected</text><text x=\"130\" y=\"{}\" fill=\"#1f77b4\">no injection</text>",
            h - 12.0,
            h - 12.0
        );
        out.push_str("<text x=\"560\" y=\"308\">denoising steps</text>\n</svg>\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn video(t: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let hw = 16;
        let mut d = Vec::new();
        for fr in 0..t {
            for p in 0..hw {
                for _ in 0..3 {
                    d.push(f(fr, p));
                }
            }
        }
        Tensor::from_vec(&[t, 4, 4, 3], d)
    }

    #[test]
    fn psnr_examples() {
        let a = video(2, |_, _| 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let zero = video(2, |_, _| 0.0);
        let one = video(2, |_, _| 1.0);
        assert!(psnr(&zero, &one).unwrap().abs() < 1e-12);
        let b = video(2, |_, _| 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &video(3, |_, _| 0.5)).is_err());
    }

    #[test]
    fn perplexity_examples() {
        assert!((codebook_perplexity(&[5; 64]).unwrap() - 64.0).abs() < 1e-9);
        assert_eq!(codebook_perplexity(&[0, 7, 0]).unwrap(), 1.0);
        assert!((codebook_perplexity(&[3, 1]).unwrap() - 1.7548).abs() < 1e-4);
        assert!(codebook_perplexity(&[0, 0]).is_err());
    }

    #[test]
    fn temporal_consistency_examples() {
        assert!((temporal_consistency(&video(4, |_, p| p as f64 + 1.0)).unwrap() - 1.0).abs() < 1e-12);
        let alt = video(4, |f, p| if f % 2 == 0 { 1.0 + p as f64 } else { -1.0 - p as f64 });
        assert!((temporal_consistency(&alt).unwrap() + 1.0).abs() < 1e-12);
        let z = temporal_consistency_flagged(&video(3, |f, _| f as f64)).unwrap();
        assert_eq!(z.skipped, 1);
        assert!(temporal_consistency(&video(1, |_, _| 1.0)).is_err());
    }

    #[test]
    fn dynamic_degree_static_is_zero() {
        assert_eq!(dynamic_degree(&video(3, |_, p| p as f64 / 16.0)).unwrap(), 0.0);
        let flip = video(2, |f, _| f as f64);
        assert_eq!(dynamic_degree(&flip).unwrap(), 1.0);
    }

    fn square(t: usize, x0: usize, w: usize) -> Tensor {
        let mut d = vec![0.0; t * 8 * 8 * 3];
        for f in 0..t {
            for y in 0..4 {
                for x in x0..x0 + w {
                    for c in 0..3 {
                        d[((f * 8 + y) * 8 + x) * 3 + c] = 1.0;
                    }
                }
            }
        }
        Tensor::from_vec(&[t, 8, 8, 3], d)
    }

    #[test]
    fn layout_iou_examples() {
        let a = square(2, 0, 2);
        assert_eq!(layout_iou(&a, &a, 0.15).unwrap(), 1.0);
        assert_eq!(layout_iou(&a, &square(2, 4, 2), 0.15).unwrap(), 0.0);
        assert!((layout_iou(&a, &square(2, 1, 2), 0.15).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let blank = Tensor::zeros(&[2, 8, 8, 3]);
        let f = layout_iou_flagged(&blank, &blank, 0.15).unwrap();
        assert_eq!((f.value, f.skipped), (0.0, 2));
    }

    #[test]
    fn metric_ranges_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let a = Tensor::uniform(&[3, 4, 4, 3], 0.0, 1.0, &mut rng);
            let b = Tensor::uniform(&[3, 4, 4, 3], -1.0, 1.0, &mut rng);
            let iou = layout_iou(&a, &b, 0.15).unwrap();
            assert!((0.0..=1.0).contains(&iou));
            let tc = temporal_consistency(&b).unwrap();
            assert!((-1.0..=1.0).contains(&tc));
            assert!(dynamic_degree(&b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn sign_test_tails() {
        let all: Vec<(f64, f64)> = (0..20).map(|_| (1.0, 0.0)).collect();
        assert!((sign_test(&all) - 0.5f64.powi(20)).abs() < 1e-18);
        let half: Vec<(f64, f64)> = (0..2).map(|i| (i as f64, 0.5)).collect();
        assert!((sign_test(&half) - 0.75).abs() < 1e-12);
        assert_eq!(sign_test(&[(1.0, 1.0)]), 1.0);
    }

    #[test]
    fn sweep_single_point_and_determinism() {
        let gen = |steps: usize, inj: bool, c: &u64| -> Result<(Tensor, Tensor)> {
            let a = square(3, (*c as usize) % 4, 2);
            let b = square(3, (*c as usize + usize::from(!inj) + steps % 2) % 4, 2);
            Ok((a, b))
        };
        let t = steps_sweep(&[30], &[1u64, 2], 0.15, gen).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.to_tsv().lines().count(), 3);
        let t2 = steps_sweep(&[30], &[1u64, 2], 0.15, gen).unwrap();
        assert_eq!(t, t2);
        assert!(t.to_svg().starts_with("<svg"));
        let multi = steps_sweep(&[3, 5, 10, 30], &[1u64], 0.15, gen).unwrap();
        assert_eq!(multi.rows.len(), 8);
        assert!(multi.get(5, true).is_some());
    }
}
