//! Sample and trajectory metrics.

use std::cmp::Ordering;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const ENERGY_SUBSAMPLE: usize = 2048;

fn dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_pair_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let mut total = 0.0;
    for ra in a.rows() {
        let mut row = 0.0;
        for rb in b.rows() {
            row += dist(ra, rb);
        }
        total += row;
    }
    total / (a.nrows() as f64 * b.nrows() as f64)
}

/// Total order on sample sets so that both argument orders evaluate the
/// same floating-point expression.
fn set_order(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Ordering {
    a.nrows().cmp(&b.nrows()).then_with(|| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

fn check_pair(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension {
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::config("samples", "energy distance needs nonempty sets"));
    }
    Ok(())
}

/// `2 E|a - b| - E|a - a'| - E|b - b'|` over all pairs (V-statistic, so an
/// identical multiset gives exactly 0).
pub fn energy_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_pair(a, b)?;
    let (a, b) = if set_order(a, b) == Ordering::Greater { (b, a) } else { (a, b) };
    let cross = mean_pair_distance(a, b);
    let saa = mean_pair_distance(a, a);
    let sbb = mean_pair_distance(b, b);
    Ok(2.0 * cross - saa - sbb)
}

/// Energy distance on at most `max_points` rows of each set, drawn without
/// replacement with a seeded generator.
pub fn energy_distance_subsampled(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    max_points: usize,
    seed: u64,
) -> Result<f64> {
    check_pair(a, b)?;
    let (a, b) = if set_order(a, b) == Ordering::Greater { (b, a) } else { (a, b) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |m: ArrayView2<f64>| -> Array2<f64> {
        if m.nrows() <= max_points {
            return m.to_owned();
        }
        let idx = sample_indices(&mut rng, m.nrows(), max_points).into_vec();
        m.select(ndarray::Axis(0), &idx)
    };
    let (sa, sb) = (pick(a), pick(b));
    energy_distance(sa.view(), sb.view())
}

/// All pairs up to [`ENERGY_SUBSAMPLE`] rows per set, seeded subsampling above.
pub fn energy_distance_auto(a: ArrayView2<f64>, b: ArrayView2<f64>, seed: u64) -> Result<f64> {
    if a.nrows() <= ENERGY_SUBSAMPLE && b.nrows() <= ENERGY_SUBSAMPLE {
        energy_distance(a, b)
    } else {
        energy_distance_subsampled(a, b, ENERGY_SUBSAMPLE, seed)
    }
}

/// Root mean squared distance between paired rows (e.g. final samples of two
/// runs from the same initial points).
pub fn trajectory_rmse(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::config(
            "samples",
            format!("paired sets differ in shape: {:?} vs {:?}", a.dim(), b.dim()),
        ));
    }
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = a.rows().into_iter().zip(b.rows()).map(|(x, y)| dist(x, y).powi(2)).sum();
    Ok((total / a.nrows() as f64).sqrt())
}

/// Mean perpendicular distance of interior points to the chord joining the
/// endpoints, divided by the chord length. Rows of `points` are ordered
/// states of one trajectory.
pub fn straightness(points: ArrayView2<f64>) -> Result<f64> {
    let n = points.nrows();
    if n < 3 {
        return Err(Error::config("trajectory", "straightness needs at least 3 records"));
    }
    let start = points.row(0);
    let end = points.row(n - 1);
    let chord = &end - &start;
    let len = chord.dot(&chord).sqrt();
    if !(len > 0.0) {
        return Err(Error::NonFinite("trajectory endpoints coincide".into()));
    }
    let u = &chord / len;
    let interior = points.slice(s![1..n - 1, ..]);
    let mut total = 0.0;
    for p in interior.rows() {
        let rel = &p - &start;
        let along = rel.dot(&u);
        let perp = &rel - &(&u * along);
        total += perp.dot(&perp).sqrt();
    }
    Ok(total / (n - 2) as f64 / len)
}

/// Median straightness over samples, given the batch state at each record.
pub fn median_straightness(records: &[Array2<f64>]) -> Result<f64> {
    let first = records
        .first()
        .ok_or_else(|| Error::config("trajectory", "no records"))?;
    let (n, d) = first.dim();
    let mut points = Array2::zeros((records.len(), d));
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        for (k, r) in records.iter().enumerate() {
            points.row_mut(k).assign(&r.row(i));
        }
        values.push(straightness(points.view())?);
    }
    Ok(median(&values))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = array![[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]];
        assert_eq!(energy_distance(a.view(), a.view()).unwrap(), 0.0);
    }

    #[test]
    fn straight_line_has_zero_straightness() {
        let p = array![[0.0, 0.0], [1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        assert!(straightness(p.view()).unwrap().abs() < 1e-15);
        assert!(straightness(p.slice(s![..2, ..])).is_err());
    }

    #[test]
    fn rmse_shape_mismatch() {
        let a = array![[0.0, 0.0]];
        let b = array![[0.0, 0.0], [1.0, 1.0]];
        assert!(trajectory_rmse(a.view(), b.view()).is_err());
    }
}
