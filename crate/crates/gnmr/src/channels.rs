//! Canonical channel layout of the turbofan source files.
//!
//! Each data row is `unit cycle op1 op2 op3 s1..s21`; after dropping the two
//! index columns, channel k of the 24-wide block is addressed by the names
//! below. Sensor numbers map to the physical names used in graph configs
//! (s1 = T2, s2 = T24, ... s21 = W32).

pub const NUM_SETTINGS: usize = 3;
pub const NUM_SENSORS: usize = 21;
pub const NUM_CHANNELS: usize = NUM_SETTINGS + NUM_SENSORS;

pub const SETTING_NAMES: [&str; NUM_SETTINGS] = ["op1", "op2", "op3"];

pub const SENSOR_NAMES: [&str; NUM_SENSORS] = [
    "T2", "T24", "T30", "T50", "P2", "P15", "P30", "Nf", "Nc", "epr", "Ps30", "phi", "NRf", "NRc",
    "BPR", "farB", "htBleed", "Nf_dmd", "PCNfR_dmd", "W31", "W32",
];

/// Column of `name` within the 24-wide channel block, or None if unknown.
pub fn channel_index(name: &str) -> Option<usize> {
    SETTING_NAMES
        .iter()
        .position(|s| *s == name)
        .or_else(|| SENSOR_NAMES.iter().position(|s| *s == name).map(|i| i + NUM_SETTINGS))
}

/// All 24 channel names in column order.
pub fn channel_names() -> impl Iterator<Item = &'static str> {
    SETTING_NAMES.iter().chain(SENSOR_NAMES.iter()).copied()
}
