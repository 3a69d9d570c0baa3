//! Attention rollout and heatmap export.
//!
//! Rollout mixes each layer's head-averaged map with the identity,
//! `0.5·|A| + 0.5·I`, renormalizes rows and multiplies layers together,
//! `R = Â_L ⋯ Â_1`. Signed maps are kept alongside for inspection of
//! inhibitory (negative) weights.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{matmul_plain, Tensor};

/// Mean over heads of `h×N×N` maps.
pub fn head_average(maps: &Tensor) -> Result<Tensor> {
    let [h, n, k] = maps.shape() else {
        return Err(Error::dim("head_average", maps.shape(), &[0, 0, 0]));
    };
    let (h, n, k) = (*h, *n, *k);
    let mut out = vec![0.0; n * k];
    for i in 0..h {
        for (o, v) in out.iter_mut().zip(&maps.data()[i * n * k..(i + 1) * n * k]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= h as f64);
    Tensor::new(vec![n, k], out)
}

/// `0.5·|A| + 0.5·I` with rows scaled to sum to one. A row summing to zero
/// becomes the identity row.
pub fn residual_mix(a: &Tensor) -> Result<Tensor> {
    let [n, k] = a.shape() else {
        return Err(Error::dim("rollout", a.shape(), &[0, 0]));
    };
    if n != k {
        return Err(Error::dim("rollout", a.shape(), &[*n, *n]));
    }
    let n = *n;
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        let row = &mut out[r * n..(r + 1) * n];
        for (c, o) in row.iter_mut().enumerate() {
            *o = 0.5 * a.get2(r, c).abs() + if r == c { 0.5 } else { 0.0 };
        }
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        } else {
            row.iter_mut().enumerate().for_each(|(c, v)| *v = f64::from(u8::from(c == r)));
        }
    }
    Tensor::new(vec![n, n], out)
}

/// Row-stochastic rollout of per-layer `N×N` maps, first layer first.
pub fn rollout_accumulate(layers: &[Tensor]) -> Result<Tensor> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Usage("rollout needs at least one layer".into()))?;
    let mut joint = residual_mix(first)?;
    for a in &layers[1..] {
        if a.shape() != first.shape() {
            return Err(Error::dim("rollout", first.shape(), a.shape()));
        }
        joint = matmul_plain(&residual_mix(a)?, &joint)?;
    }
    Ok(joint)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutMap {
    /// Signed head-averaged map per layer.
    pub layers: Vec<Tensor>,
    pub rollout: Tensor,
    /// Axis labels, one per token or patch position.
    pub labels: Vec<String>,
}

impl RolloutMap {
    /// Head-averages each layer's fused `h×N×N` maps and accumulates them.
    pub fn from_fused(fused: &[Tensor], labels: Vec<String>) -> Result<Self> {
        let layers = fused.iter().map(head_average).collect::<Result<Vec<_>>>()?;
        let rollout = rollout_accumulate(&layers)?;
        Ok(Self {
            layers,
            rollout,
            labels,
        })
    }
}

/// Row 0 without its own column, reshaped to a `g×g` grid: the class token's
/// attribution over image patches.
pub fn class_token_grid(map: &Tensor) -> Result<Tensor> {
    let n = map.cols();
    let g = ((n - 1) as f64).sqrt().round() as usize;
    if map.rank() != 2 || g * g + 1 != n {
        return Err(Error::dim("class_token_grid", map.shape(), &[g * g + 1, g * g + 1]));
    }
    Tensor::new(vec![g, g], map.row(0)[1..].to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapFormat {
    Pgm,
    Csv,
}

/// Min–max scaling to bytes, rounding half up; a constant map becomes all 0.
pub fn normalize_to_bytes(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

fn dims(map: &Tensor) -> Result<(usize, usize)> {
    match map.shape() {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim("export_heatmap", s, &[0, 0])),
    }
}

pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = dims(map)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(normalize_to_bytes(map.data()));
    Ok(out)
}

/// One line per row, values comma-separated in shortest round-trip form.
pub fn encode_csv(map: &Tensor) -> Result<String> {
    let (h, w) = dims(map)?;
    let mut s = String::new();
    for r in 0..h {
        for c in 0..w {
            if c > 0 {
                s.push(',');
            }
            write!(s, "{}", map.data()[r * w + c]).unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn parse_csv(text: &str) -> Result<Tensor> {
    let rows = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Data(format!("bad value {v:?}"))))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows).map_err(|_| Error::Data("ragged or empty heatmap CSV".into()))
}

pub fn export_heatmap(map: &Tensor, path: impl AsRef<Path>, format: HeatmapFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        HeatmapFormat::Pgm => encode_pgm(map)?,
        HeatmapFormat::Csv => encode_csv(map)?.into_bytes(),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the positive part and the magnitude of the negative part of a
/// signed map as `<stem>_pos.<ext>` and `<stem>_neg.<ext>`.
pub fn export_signed(map: &Tensor, dir: impl AsRef<Path>, stem: &str, format: HeatmapFormat) -> Result<[PathBuf; 2]> {
    let ext = match format {
        HeatmapFormat::Pgm => "pgm",
        HeatmapFormat::Csv => "csv",
    };
    let split = |f: fn(f64) -> f64| -> Result<Tensor> {
        Tensor::new(map.shape().to_vec(), map.data().iter().map(|&v| f(v)).collect())
    };
    let pos = split(|v| v.max(0.0))?;
    let neg = split(|v| (-v).max(0.0))?;
    let dir = dir.as_ref();
    let p = dir.join(format!("{stem}_pos.{ext}"));
    let n = dir.join(format!("{stem}_neg.{ext}"));
    export_heatmap(&pos, &p, format)?;
    export_heatmap(&neg, &n, format)?;
    Ok([p, n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn head_average_examples() {
        let a = Tensor::from_rows(&[vec![0.2, -0.4], vec![1.0, 0.3]]).unwrap();
        let one = Tensor::stack(&[a.clone()]).unwrap();
        assert_eq!(head_average(&one).unwrap(), a);
        let neg = Tensor::new(vec![2, 2], a.data().iter().map(|v| -v).collect()).unwrap();
        let both = Tensor::stack(&[a, neg]).unwrap();
        assert!(head_average(&both).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rollout_examples() {
        let z = Tensor::zeros(vec![3, 3]);
        assert_eq!(rollout_accumulate(&[z.clone(), z]).unwrap(), Tensor::eye(3));
        let a = Tensor::from_rows(&[vec![0.25, 0.75], vec![0.5, 0.5]]).unwrap();
        let r = rollout_accumulate(std::slice::from_ref(&a)).unwrap();
        let expect = [0.625, 0.375, 0.25, 0.75];
        for (x, e) in r.data().iter().zip(expect) {
            assert_abs_diff_eq!(*x, e, epsilon = 1e-15);
        }
        assert_eq!(rollout_accumulate(&[Tensor::eye(4), Tensor::eye(4)]).unwrap(), Tensor::eye(4));
        assert!(rollout_accumulate(&[]).is_err());
    }

    #[test]
    fn pgm_bytes_round_half_up() {
        let m = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.25]]).unwrap();
        let b = encode_pgm(&m).unwrap();
        assert_eq!(&b[..11], b"P5\n2 2\n255\n");
        assert_eq!(&b[11..], &[0, 255, 128, 64]);
        let c = encode_pgm(&Tensor::filled(vec![2, 3], 0.4)).unwrap();
        assert!(c[c.len() - 6..].iter().all(|v| *v == 0));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = Tensor::from_rows(&[vec![0.1, -1.0 / 3.0], vec![1e-300, 2.5e10]]).unwrap();
        assert_eq!(parse_csv(&encode_csv(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn class_token_grid_reads_row_zero() {
        let mut m = Tensor::zeros(vec![5, 5]);
        m.data_mut()[1..5].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let g = class_token_grid(&m).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
