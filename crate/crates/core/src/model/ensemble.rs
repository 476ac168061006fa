use super::ModelError;
use crate::labels::{check_simplex, NUM_CLASSES};

/// Unweighted mean of the systems' probability vectors.
///
/// When every system agrees bit for bit the shared vector is returned as is,
/// so that averaging a system with itself cannot introduce rounding.
pub fn ensemble_predict(outputs: &[[f64; NUM_CLASSES]]) -> Result<[f64; NUM_CLASSES], ModelError> {
    let first = outputs.first().ok_or(ModelError::EmptyEnsemble)?;
    for o in outputs {
        check_simplex(o, 1e-6).map_err(|e| ModelError::TargetNotOnSimplex(e.to_string()))?;
    }
    if outputs.iter().all(|o| o == first) {
        return Ok(*first);
    }
    let n = outputs.len() as f64;
    let mut out = [0.0; NUM_CLASSES];
    for o in outputs {
        for (a, b) in out.iter_mut().zip(o) {
            *a += b;
        }
    }
    for a in &mut out {
        *a /= n;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_identities() {
        let d = [0.1, 0.2, 0.05, 0.05, 0.1, 0.1, 0.1, 0.2, 0.1];
        assert_eq!(ensemble_predict(&[d]).unwrap(), d);
        assert_eq!(ensemble_predict(&[d, d, d]).unwrap(), d);
        let mut a = [0.0; NUM_CLASSES];
        let mut b = [0.0; NUM_CLASSES];
        a[0] = 1.0;
        b[1] = 1.0;
        let m = ensemble_predict(&[a, b]).unwrap();
        assert_eq!(&m[..2], &[0.5, 0.5]);
        assert!(matches!(ensemble_predict(&[]), Err(ModelError::EmptyEnsemble)));
    }
}
