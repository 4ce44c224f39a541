//! Array state on disk for `--persist DIR`.
//!
//! ```text
//! DIR/config.txt    key = value array config
//! DIR/dev{i}.img    one device image per member
//! DIR/state.json    resync bookkeeping and the last bench/convert reports
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use eraid_core::bench::RunReport;
use eraid_core::config::ArrayConfigFile;
use eraid_core::czdev::{load_image, save_image};
use eraid_core::fault::FaultInjector;
use eraid_core::iopath::{ElasticArray, RecoveryReport};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct State {
    /// Segments written while a device was offline.
    pub dirty: Vec<u64>,
    pub last_bench: Option<RunReport>,
    pub last_convert: Option<serde_json::Value>,
}

pub struct Store {
    dir: PathBuf,
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Device(format!("{}: {e}", path.display()))
}

impl Store {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.dir.join("config.txt")
    }

    fn device_path(&self, id: usize) -> PathBuf {
        self.dir.join(format!("dev{id}.img"))
    }

    fn state_path(&self) -> PathBuf {
        self.dir.join("state.json")
    }

    pub fn exists(&self) -> bool {
        self.config_path().is_file()
    }

    pub fn load_config(&self) -> Result<ArrayConfigFile, CliError> {
        let path = self.config_path();
        let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
        Ok(ArrayConfigFile::parse(&text)?)
    }

    pub fn load_state(&self) -> Result<State, CliError> {
        let path = self.state_path();
        if !path.is_file() {
            return Ok(State::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Device(format!("{}: {e}", path.display())))
    }

    /// Writes a freshly formatted array and its config.
    pub fn create(&self, cfg: &ArrayConfigFile, array: &ElasticArray) -> Result<(), CliError> {
        fs::create_dir_all(&self.dir).map_err(|e| io(&self.dir, e))?;
        let path = self.config_path();
        fs::write(&path, cfg.to_text()).map_err(|e| io(&path, e))?;
        self.save(array, &State::default())
    }

    /// Loads every device image and runs recovery.
    pub fn open(&self, cfg: &ArrayConfigFile) -> Result<(ElasticArray, RecoveryReport, State), CliError> {
        let faults = Arc::new(FaultInjector::new());
        let mut devices = Vec::with_capacity(cfg.array.devices);
        for id in 0..cfg.array.devices {
            let mut dev = load_image(&self.device_path(id))?;
            dev.attach_faults(faults.clone());
            devices.push(Arc::new(dev));
        }
        let (mut array, report) = ElasticArray::open(cfg.array.clone(), devices, faults)?;
        let state = self.load_state()?;
        array.mark_dirty(state.dirty.iter().copied());
        array.reset_counters();
        Ok((array, report, state))
    }

    /// Replaces the images and state file. Each file goes through a rename.
    pub fn save(&self, array: &ElasticArray, state: &State) -> Result<(), CliError> {
        for dev in array.devices() {
            let path = self.device_path(dev.id());
            let tmp = path.with_extension("img.tmp");
            save_image(dev, &tmp)?;
            fs::rename(&tmp, &path).map_err(|e| io(&path, e))?;
        }
        let state = State {
            dirty: array.dirty_list(),
            ..state.clone()
        };
        let path = self.state_path();
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(&state).expect("state serializes");
        fs::write(&tmp, text).map_err(|e| io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io(&path, e))?;
        Ok(())
    }
}
