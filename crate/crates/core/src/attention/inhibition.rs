/// Rate model of lateral inhibition, `r_i = φ(e_i − α·Σ_{j∈N(i)} e_j)`.
///
/// `neighbors[i]` lists the indices inhibiting unit `i`.
///
/// # Panics
///
/// If `neighbors` is shorter than `e` or holds an index outside `e`.
pub fn lateral_inhibition_reference<F: Fn(f64) -> f64>(
    e: &[f64],
    alpha: f64,
    neighbors: &[Vec<usize>],
    phi: F,
) -> Vec<f64> {
    e.iter()
        .enumerate()
        .map(|(i, &ei)| {
            let inhibit: f64 = neighbors[i].iter().map(|&j| e[j]).sum();
            phi(ei - alpha * inhibit)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relu(x: f64) -> f64 {
        x.max(0.0)
    }

    #[test]
    fn zero_alpha_is_identity() {
        let e = [0.3, -1.0, 2.5];
        let n = vec![vec![1, 2], vec![0, 2], vec![0, 1]];
        assert_eq!(lateral_inhibition_reference(&e, 0.0, &n, |x| x), e.to_vec());
    }

    #[test]
    fn uniform_stimulus_full_neighborhood() {
        let e = [0.7; 4];
        let n: Vec<Vec<usize>> = (0..4).map(|i| (0..4).filter(|&j| j != i).collect()).collect();
        let r = lateral_inhibition_reference(&e, 0.1, &n, relu);
        for v in r {
            assert!((v - relu(0.7 * (1.0 - 0.1 * 3.0))).abs() < 1e-15);
        }
    }

    #[test]
    fn mutual_pair_with_relu() {
        let r = lateral_inhibition_reference(&[1.0, 0.5], 0.5, &[vec![1], vec![0]], relu);
        assert_eq!(r, vec![0.75, 0.0]);
    }
}
