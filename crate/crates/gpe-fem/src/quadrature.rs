//! Quadrature rules on reference simplices, in barycentric coordinates.
//!
//! Weights are normalized so that they sum to one; integrals over a physical
//! element are the weighted sum of integrand values times the element volume.

use crate::{Error, Result};

/// A quadrature point: barycentric coordinates (first `d + 1` entries used)
/// and its weight.
#[derive(Debug, Clone, Copy)]
pub struct QuadPoint {
    pub bary: [f64; 4],
    pub weight: f64,
}

/// Symmetric rule on the reference simplex of dimension `dim`, exact for
/// polynomials of total degree `degree`. Supported: `dim = 1` up to degree 9,
/// `dim = 2` up to degree 4.
pub fn simplex_rule(dim: usize, degree: usize) -> Result<Vec<QuadPoint>> {
    match dim {
        1 => gauss_1d(degree),
        2 => triangle_rule(degree),
        _ => Err(Error::Unsupported(format!(
            "no quadrature rule for dimension {dim}"
        ))),
    }
}

fn gauss_1d(degree: usize) -> Result<Vec<QuadPoint>> {
    // Gauss-Legendre on [0,1]; n points are exact to degree 2n - 1.
    let pts: &[(f64, f64)] = match degree {
        0 | 1 => &[(0.5, 1.0)],
        2 | 3 => &[
            (0.21132486540518713, 0.5),
            (0.7886751345948129, 0.5),
        ],
        4 | 5 => &[
            (0.1127016653792583, 0.2777777777777778),
            (0.5, 0.4444444444444444),
            (0.8872983346207417, 0.2777777777777778),
        ],
        6 | 7 => &[
            (0.06943184420297371, 0.17392742256872692),
            (0.33000947820757187, 0.3260725774312731),
            (0.6699905217924281, 0.3260725774312731),
            (0.9305681557970262, 0.17392742256872692),
        ],
        8 | 9 => &[
            (0.046910077030668074, 0.11846344252809454),
            (0.23076534494715845, 0.23931433524968324),
            (0.5, 0.28444444444444444),
            (0.7692346550528415, 0.23931433524968324),
            (0.9530899229693319, 0.11846344252809454),
        ],
        _ => {
            return Err(Error::Unsupported(format!(
                "1D quadrature of degree {degree} not provided"
            )))
        }
    };
    Ok(pts
        .iter()
        .map(|&(x, w)| QuadPoint {
            bary: [1.0 - x, x, 0.0, 0.0],
            weight: w,
        })
        .collect())
}

fn triangle_rule(degree: usize) -> Result<Vec<QuadPoint>> {
    match degree {
        0 | 1 => Ok(vec![QuadPoint {
            bary: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0],
            weight: 1.0,
        }]),
        2 => {
            // edge midpoint rule
            let w = 1.0 / 3.0;
            Ok([(0.5, 0.5, 0.0), (0.0, 0.5, 0.5), (0.5, 0.0, 0.5)]
                .iter()
                .map(|&(a, b, c)| QuadPoint {
                    bary: [a, b, c, 0.0],
                    weight: w,
                })
                .collect())
        }
        3 | 4 => {
            // Six-point symmetric rule, exact for degree 4.
            let mut pts = Vec::with_capacity(6);
            let groups = [
                (0.816847572980459, 0.091576213509771, 0.109951743655322),
                (0.108103018168070, 0.445948490915965, 0.223381589678011),
            ];
            for &(a, b, w) in &groups {
                for rot in 0..3 {
                    let mut bary = [b, b, b, 0.0];
                    bary[rot] = a;
                    pts.push(QuadPoint { bary, weight: w });
                }
            }
            Ok(pts)
        }
        _ => Err(Error::Unsupported(format!(
            "triangle quadrature of degree {degree} not provided"
        ))),
    }
}

/// Integrate a callable over one element: `f` receives the physical
/// coordinates and the barycentric coordinates of each quadrature point.
pub fn integrate_on_element(
    mesh: &crate::mesh::SimplicialMesh,
    element: usize,
    rule: &[QuadPoint],
    mut f: impl FnMut(&[f64], &[f64]) -> f64,
) -> f64 {
    let dim = mesh.dim();
    let el = mesh.element(element);
    let mut acc = 0.0;
    let mut x = [0.0f64; 3];
    for qp in rule {
        for a in 0..dim {
            x[a] = 0.0;
            for (loc, &j) in el.iter().enumerate() {
                x[a] += qp.bary[loc] * mesh.vertex(j)[a];
            }
        }
        acc += qp.weight * f(&x[..dim], &qp.bary[..dim + 1]);
    }
    acc * mesh.volume(element)
}

/// Exact integral of a barycentric monomial over the unit reference simplex
/// of dimension `d` (volume `1/d!`): `prod_i a_i! / (|a| + d)!`.
pub fn bary_monomial_integral(d: usize, exponents: &[usize]) -> f64 {
    let total: usize = exponents.iter().sum();
    let mut num = 1.0f64;
    for &a in exponents {
        num *= factorial(a);
    }
    num / factorial(total + d)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::friedrichs_keller;

    #[test]
    fn triangle_degree4_integrates_monomials_exactly() {
        // On the reference triangle, integral of l0^a l1^b l2^c is known in
        // closed form; the physical element here is the unit right triangle.
        let rule = simplex_rule(2, 4).unwrap();
        for (a, b, c) in [(4, 0, 0), (2, 2, 0), (1, 1, 2), (3, 1, 0), (2, 1, 1)] {
            // quadrature on the reference triangle: weights sum to 1, volume 1/2
            let approx: f64 = rule
                .iter()
                .map(|qp| {
                    qp.weight * qp.bary[0].powi(a as i32) * qp.bary[1].powi(b as i32)
                        * qp.bary[2].powi(c as i32)
                })
                .sum::<f64>()
                * 0.5;
            let reference = bary_monomial_integral(2, &[a, b, c]);
            assert!(
                (approx - reference).abs() < 1e-15,
                "monomial ({a},{b},{c}): {approx} vs {reference}"
            );
        }
    }

    #[test]
    fn gauss_rules_integrate_x_powers() {
        for degree in [1usize, 3, 5, 9] {
            let rule = simplex_rule(1, degree).unwrap();
            for p in 0..=degree {
                let approx: f64 = rule
                    .iter()
                    .map(|qp| qp.weight * qp.bary[1].powi(p as i32))
                    .sum();
                let exact = 1.0 / (p as f64 + 1.0);
                assert!((approx - exact).abs() < 1e-14, "x^{p} at degree {degree}");
            }
        }
    }

    #[test]
    fn unsupported_degrees_are_rejected() {
        assert!(simplex_rule(2, 5).is_err());
        assert!(simplex_rule(3, 4).is_err());
        assert!(simplex_rule(1, 20).is_err());
    }

    #[test]
    fn element_integration_matches_area() {
        let mesh = friedrichs_keller(&[0.0, 0.0], &[2.0, 2.0], 2).unwrap();
        let rule = simplex_rule(2, 4).unwrap();
        let total: f64 = (0..mesh.n_elements())
            .map(|e| integrate_on_element(&mesh, e, &rule, |_, _| 1.0))
            .sum();
        assert!((total - 4.0).abs() < 1e-13);
    }
}
