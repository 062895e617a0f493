//! Dominant-term operation counts with unit constants.

/// `pixels · K² · C · D · N`, where `pixels = H·W·M`.
pub fn sd_product(pixels: u128, k: u128, c: u128, d: u128, iters: u128) -> u128 {
    pixels * k * k * c * d * iters
}

/// `D K⁶ C³ + D K⁴ C² H W M`
pub fn primal(h: u128, w: u128, k: u128, c: u128, d: u128, m: u128) -> u128 {
    let k2c = k * k * c;
    d * k2c * k2c * k2c + d * k2c * k2c * h * w * m
}

/// `D H³ W³ M³ + D K² C H² W² M²`
pub fn dual(h: u128, w: u128, k: u128, c: u128, d: u128, m: u128) -> u128 {
    let n = h * w * m;
    d * n * n * n + d * k * k * c * n * n
}
