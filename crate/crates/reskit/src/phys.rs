//! Physical constants (SI, CODATA 2018 exact values where defined).

/// Planck constant, J s.
pub const PLANCK_H: f64 = 6.626_070_15e-34;
/// Reduced Planck constant, J s.
pub const HBAR: f64 = PLANCK_H / (2.0 * std::f64::consts::PI);
/// Boltzmann constant, J/K.
pub const BOLTZMANN_KB: f64 = 1.380_649e-23;
/// Electron volt, J.
pub const ELECTRON_VOLT: f64 = 1.602_176_634e-19;

/// Converts a source power in dBm plus line attenuation in dB to watts at the
/// device feedline.
pub fn dbm_to_watts(source_power_dbm: f64, attenuation_db: f64) -> f64 {
    10f64.powf((source_power_dbm + attenuation_db) / 10.0 - 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dbm_conversion() {
        assert!((dbm_to_watts(0.0, 0.0) - 1e-3).abs() < 1e-18);
        // -30 dBm source through -75 dB of line attenuation
        let p = dbm_to_watts(-30.0, -75.0);
        assert!((p - 3.1623e-14).abs() / p < 1e-4);
    }
}
