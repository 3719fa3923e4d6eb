use serde::{Deserialize, Serialize};

pub const MINUTE_SLOTS: usize = 60;
pub const HOUR_SLOTS: usize = 24;
pub const WEEKDAY_SLOTS: usize = 7;
/// Width of the concatenated one-hot time encoding.
pub const TIME_ONE_HOT: usize = MINUTE_SLOTS + HOUR_SLOTS + WEEKDAY_SLOTS;

/// Calendar position of one minute (UTC).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeFeatures {
    pub minute_of_hour: u8,
    pub hour_of_day: u8,
    /// 0 = Monday.
    pub weekday: u8,
}

impl TimeFeatures {
    pub fn from_epoch_minute(minute: u64) -> Self {
        let day = minute / 1440;
        Self {
            minute_of_hour: (minute % 60) as u8,
            hour_of_day: ((minute / 60) % 24) as u8,
            // 1970-01-01 was a Thursday.
            weekday: ((day + 3) % 7) as u8,
        }
    }

    /// Positions of the three hot entries inside the time one-hot block.
    pub fn one_hot_indices(&self) -> [usize; 3] {
        [
            self.minute_of_hour as usize,
            MINUTE_SLOTS + self.hour_of_day as usize,
            MINUTE_SLOTS + HOUR_SLOTS + self.weekday as usize,
        ]
    }
}
