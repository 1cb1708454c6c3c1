//! Dataset container, binary file format, time features, and time splits.
//!
//! ## File format (version 1, little-endian)
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `STDS` |
//! | 4     | format version, u32 |
//! | 8     | regions R, u64 |
//! | 8     | total slots T, u64 |
//! | 8     | features F, u64 |
//! | 4     | slots per day, u32 |
//! | 4     | start day-of-week (0 = Monday), u32 |
//! | 8     | config-echo byte length, u64 |
//! | n     | config echo, UTF-8 |
//! | 8·R·T·F | payload, f64 row-major (R × T × F) |
//!
//! The config echo carries the exact generation/ingestion settings so any
//! emitted file is enough to reproduce the command that wrote it.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::TimeFeature;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"STDS";
const VERSION: u32 = 1;

/// An in-memory spatio-temporal series with its clock metadata.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `(R, T_total, F)` row-major.
    pub series: Tensor,
    /// Slots in one day (tod advances by 1/slots_per_day each slot).
    pub slots_per_day: u32,
    /// Day-of-week of slot 0, in `[0, 7)`.
    pub start_dow: u32,
}

impl Dataset {
    pub fn new(series: Tensor, slots_per_day: u32, start_dow: u32) -> Result<Self> {
        if series.rank() != 3 {
            return Err(Error::Data(format!(
                "series must be (regions, slots, features), got {:?}",
                series.shape()
            )));
        }
        if slots_per_day == 0 {
            return Err(Error::Data("slots_per_day must be positive".into()));
        }
        if start_dow >= 7 {
            return Err(Error::Data(format!(
                "start day-of-week must be in [0, 7), got {start_dow}"
            )));
        }
        Ok(Dataset {
            series,
            slots_per_day,
            start_dow,
        })
    }

    pub fn regions(&self) -> usize {
        self.series.shape()[0]
    }

    pub fn total_slots(&self) -> usize {
        self.series.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.series.shape()[2]
    }

    /// Normalized time features of one slot.
    pub fn time_feature(&self, slot: usize) -> TimeFeature {
        let spd = self.slots_per_day as usize;
        let day = self.start_dow as usize + slot / spd;
        TimeFeature {
            tod: (slot % spd) as f64 / spd as f64,
            dow: (day % 7) as f64 / 7.0,
        }
    }

    /// Copies a window `(R, len, F)` starting at `start`, with its time
    /// features.
    pub fn window(&self, start: usize, len: usize) -> Result<(Tensor, Vec<TimeFeature>)> {
        let (regions, slots, feats) = (self.regions(), self.total_slots(), self.features());
        if start + len > slots {
            return Err(Error::Data(format!(
                "window [{start}, {}) exceeds {slots} slots",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(regions * len * feats);
        for r in 0..regions {
            let row = (r * slots + start) * feats;
            data.extend_from_slice(&self.series.data()[row..row + len * feats]);
        }
        let feats_list = (start..start + len).map(|t| self.time_feature(t)).collect();
        Ok((Tensor::new(vec![regions, len, feats], data)?, feats_list))
    }

    /// Writes the documented binary format.
    pub fn write(&self, path: &Path, config_echo: &str) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.regions() as u64).to_le_bytes());
        out.extend_from_slice(&(self.total_slots() as u64).to_le_bytes());
        out.extend_from_slice(&(self.features() as u64).to_le_bytes());
        out.extend_from_slice(&self.slots_per_day.to_le_bytes());
        out.extend_from_slice(&self.start_dow.to_le_bytes());
        let echo = config_echo.as_bytes();
        out.extend_from_slice(&(echo.len() as u64).to_le_bytes());
        out.extend_from_slice(echo);
        for &v in self.series.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    /// Reads the documented binary format, returning the dataset and the
    /// stored config echo.
    pub fn read(path: &Path) -> Result<(Self, String)> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = 0usize;

        let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
            if *cursor + n > bytes.len() {
                return Err(Error::Data(format!(
                    "dataset file truncated: wanted {} bytes at offset {}, file has {}",
                    n,
                    *cursor,
                    bytes.len()
                )));
            }
            let slice = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(slice)
        };

        let magic = take(&mut cursor, 4)?;
        if magic != MAGIC {
            return Err(Error::Data(
                "not a dataset file (bad magic; expected STDS)".into(),
            ));
        }
        let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Data(format!(
                "dataset format version {version} unsupported (reader supports {VERSION})"
            )));
        }
        let regions = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let slots = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let feats = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let slots_per_day = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
        let start_dow = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
        let echo_len = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let echo = String::from_utf8(take(&mut cursor, echo_len)?.to_vec())
            .map_err(|_| Error::Data("config echo is not valid UTF-8".into()))?;

        let count = regions * slots * feats;
        let payload = take(&mut cursor, count * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let series = Tensor::new(vec![regions, slots, feats], data)?;
        Ok((Dataset::new(series, slots_per_day, start_dow)?, echo))
    }
}

/// Writes one planted label per region, one integer per line.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = String::new();
    for &l in labels {
        out.push_str(&format!("{l}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a label file, checking the count against the region count.
pub fn read_labels(path: &Path, regions: usize) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let labels: Vec<usize> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::Data(format!("bad label line: {l:?}")))
        })
        .collect::<Result<_>>()?;
    if labels.len() != regions {
        return Err(Error::Data(format!(
            "label file has {} entries for {} regions",
            labels.len(),
            regions
        )));
    }
    Ok(labels)
}

/// Window start offsets for the train/val/test portions of a series,
/// split 6:2:2 along time; windows never cross a split boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitWindows {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub window: usize,
}

pub fn split_windows(total_slots: usize, window: usize, stride: usize) -> Result<SplitWindows> {
    if window == 0 || stride == 0 {
        return Err(Error::Config(
            "window and stride must be positive".into(),
        ));
    }
    let train_end = total_slots * 6 / 10;
    let val_end = total_slots * 8 / 10;
    let starts = |lo: usize, hi: usize| -> Vec<usize> {
        if hi < lo + window {
            return Vec::new();
        }
        (lo..=hi - window).step_by(stride).collect()
    };
    let split = SplitWindows {
        train: starts(0, train_end),
        val: starts(train_end, val_end),
        test: starts(val_end, total_slots),
        window,
    };
    if split.train.is_empty() {
        return Err(Error::Data(format!(
            "train split [0, {train_end}) too short for window {window}"
        )));
    }
    Ok(split)
}

/// Concatenates the slots of the training split into one tensor for
/// normalizer fitting: `(R, train_slots, F)`.
pub fn training_slice(dataset: &Dataset) -> Result<Tensor> {
    let train_end = dataset.total_slots() * 6 / 10;
    let (slice, _) = dataset.window(0, train_end)?;
    Ok(slice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("stmae-data-test-{}-{name}", std::process::id()));
        p
    }

    fn sample_dataset() -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        Dataset::new(Tensor::uniform_init(&[3, 96, 2], &mut rng), 48, 2).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let ds = sample_dataset();
        let path = temp_path("roundtrip.bin");
        ds.write(&path, "# seed = 7\n").unwrap();
        let (back, echo) = Dataset::read(&path).unwrap();
        fs::remove_file(&path).ok();
        assert_eq!(echo, "# seed = 7\n");
        assert_eq!(back.slots_per_day, 48);
        assert_eq!(back.start_dow, 2);
        let same = ds
            .series
            .data()
            .iter()
            .zip(back.series.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn truncated_file_reports_diagnostic() {
        let ds = sample_dataset();
        let path = temp_path("truncated.bin");
        ds.write(&path, "").unwrap();
        let full = fs::read(&path).unwrap();
        fs::write(&path, &full[..full.len() - 10]).unwrap();
        let err = Dataset::read(&path).unwrap_err();
        fs::remove_file(&path).ok();
        match err {
            Error::Data(msg) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_and_version_are_diagnosed() {
        let path = temp_path("magic.bin");
        fs::write(&path, b"NOPE0000").unwrap();
        let err = Dataset::read(&path).unwrap_err();
        assert!(matches!(err, Error::Data(msg) if msg.contains("magic")));

        let ds = sample_dataset();
        ds.write(&path, "").unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = Dataset::read(&path).unwrap_err();
        fs::remove_file(&path).ok();
        assert!(matches!(err, Error::Data(msg) if msg.contains("version 99")));
    }

    #[test]
    fn time_features_step_through_day_and_week() {
        let ds = sample_dataset(); // 48 slots/day, starts on day 2
        let f0 = ds.time_feature(0);
        assert_eq!(f0.tod, 0.0);
        assert!((f0.dow - 2.0 / 7.0).abs() < 1e-15);
        let f1 = ds.time_feature(1);
        assert!((f1.tod - 1.0 / 48.0).abs() < 1e-15);
        // next day
        let f48 = ds.time_feature(48);
        assert_eq!(f48.tod, 0.0);
        assert!((f48.dow - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn start_of_week_slot_zero_is_day_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ds = Dataset::new(Tensor::uniform_init(&[1, 4, 1], &mut rng), 2, 0).unwrap();
        assert_eq!(ds.time_feature(0).dow, 0.0);
    }

    #[test]
    fn window_copies_the_right_slots() {
        let ds = sample_dataset();
        let (w, feats) = ds.window(10, 5).unwrap();
        assert_eq!(w.shape(), &[3, 5, 2]);
        assert_eq!(feats.len(), 5);
        for r in 0..3 {
            for t in 0..5 {
                for f in 0..2 {
                    assert_eq!(w.at(&[r, t, f]), ds.series.at(&[r, 10 + t, f]));
                }
            }
        }
        assert_eq!(feats[0], ds.time_feature(10));
        assert!(ds.window(94, 5).is_err());
    }

    #[test]
    fn splits_are_six_two_two_and_stay_inside_boundaries() {
        let s = split_windows(100, 10, 10).unwrap();
        // boundaries at 60 and 80
        assert!(s.train.iter().all(|&x| x + 10 <= 60));
        assert!(s.val.iter().all(|&x| x >= 60 && x + 10 <= 80));
        assert!(s.test.iter().all(|&x| x >= 80 && x + 10 <= 100));
        assert_eq!(s.train.len(), 6);
        assert_eq!(s.val.len(), 2);
        assert_eq!(s.test.len(), 2);
    }

    #[test]
    fn too_short_series_is_rejected() {
        assert!(split_windows(10, 12, 12).is_err());
    }

    #[test]
    fn label_io_roundtrip_and_count_check() {
        let path = temp_path("labels.txt");
        write_labels(&path, &[0, 2, 1]).unwrap();
        assert_eq!(read_labels(&path, 3).unwrap(), vec![0, 2, 1]);
        assert!(read_labels(&path, 4).is_err());
        fs::remove_file(&path).ok();
    }
}
