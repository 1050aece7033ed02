//! Line-delimited JSON log records on an optional file, plain warnings on
//! stderr.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use log::{Level, LevelFilter, Log, Metadata, Record};

struct JsonLogger {
    file: Option<Mutex<File>>,
    stderr_level: Level,
}

impl Log for JsonLogger {
    fn enabled(&self, m: &Metadata) -> bool {
        m.target().starts_with("idpaint")
    }

    fn log(&self, r: &Record) {
        if !self.enabled(r.metadata()) {
            return;
        }
        if r.level() <= self.stderr_level {
            eprintln!("{}: {}", r.level().as_str().to_lowercase(), r.args());
        }
        if let Some(f) = &self.file {
            let ts = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0);
            let rec = serde_json::json!({
                "ts": ts,
                "level": r.level().as_str(),
                "target": r.target(),
                "message": r.args().to_string(),
            });
            if let Ok(mut f) = f.lock() {
                let _ = writeln!(f, "{rec}");
            }
        }
    }

    fn flush(&self) {
        if let Some(f) = &self.file {
            if let Ok(mut f) = f.lock() {
                let _ = f.flush();
            }
        }
    }
}

pub fn init(path: Option<&Path>, verbose: bool) -> std::io::Result<()> {
    let file = match path {
        Some(p) => {
            if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(d)?;
            }
            Some(Mutex::new(File::create(p)?))
        }
        None => None,
    };
    let logger = JsonLogger {
        file,
        stderr_level: if verbose { Level::Info } else { Level::Warn },
    };
    // Only fails if a logger is already installed, which cannot happen here.
    let _ = log::set_boxed_logger(Box::new(logger));
    log::set_max_level(LevelFilter::Info);
    Ok(())
}
