//! dB / linear conversions.

pub const SPEED_OF_LIGHT: f64 = 3.0e8;

pub fn dbm_to_watt(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) / 1000.0
}

pub fn watt_to_dbm(w: f64) -> f64 {
    10.0 * (w * 1000.0).log10()
}

pub fn db_to_power_ratio(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn db_to_amplitude_ratio(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

pub fn power_ratio_to_db(r: f64) -> f64 {
    10.0 * r.log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dbm_round_trip() {
        assert!((dbm_to_watt(30.0) - 1.0).abs() < 1e-12);
        assert!((dbm_to_watt(-20.0) - 1e-5).abs() < 1e-18);
        assert!((watt_to_dbm(dbm_to_watt(-37.3)) + 37.3).abs() < 1e-12);
    }
}
