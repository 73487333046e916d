//! Fixed Gauss-Legendre rules on the unit interval.

/// Two-point rule on [0, 1]: exact for cubics.
pub const GAUSS2: [(f64, f64); 2] = [
    (0.211_324_865_405_187_1, 0.5),
    (0.788_675_134_594_812_9, 0.5),
];

/// Three-point rule on [0, 1]: exact for quintics.
pub const GAUSS3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_31, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

/// Tensor points of the three-point rule on the reference cell [0,1]^dim.
///
/// Returns `(reference coordinates, weight)`; for `dim == 1` the second
/// coordinate is zero.
pub fn cell_rule(dim: usize) -> Vec<([f64; 2], f64)> {
    match dim {
        1 => GAUSS3.iter().map(|&(x, w)| ([x, 0.0], w)).collect(),
        _ => {
            let mut pts = Vec::with_capacity(9);
            for &(y, wy) in &GAUSS3 {
                for &(x, wx) in &GAUSS3 {
                    pts.push(([x, y], wx * wy));
                }
            }
            pts
        }
    }
}
