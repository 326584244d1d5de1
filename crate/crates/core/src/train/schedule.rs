pub const POLY_POWER: f64 = 0.9;

/// `lr_init · (1 − iter/total)^0.9`. Iterations past `total` get 0.
pub fn poly_lr(lr_init: f64, iter: usize, total: usize) -> f64 {
    if iter >= total {
        return 0.0;
    }
    lr_init * (1.0 - iter as f64 / total as f64).powf(POLY_POWER)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(poly_lr(1e-3, 0, 200), 1e-3);
        assert_eq!(poly_lr(1e-3, 200, 200), 0.0);
        assert_eq!(poly_lr(1e-3, 250, 200), 0.0);
    }
}
