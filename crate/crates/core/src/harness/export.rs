use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{motion_to_csv, save_motion, MotionSequence, Skeleton, TOY_FPS};

use super::stage1::Stage1Model;

pub const CODES_VERSION: &str = "attmotion-codes-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodesFile {
    pub version: String,
    pub codes: Vec<usize>,
    #[serde(default)]
    pub text: Option<String>,
}

impl CodesFile {
    pub fn new(codes: Vec<usize>, text: Option<String>) -> Self {
        Self {
            version: CODES_VERSION.to_string(),
            codes,
            text,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })?;
        if f.version != CODES_VERSION {
            return Err(Error::Parse {
                context: format!("{} field `version`", path.display()),
                message: format!("unsupported `{}`", f.version),
            });
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Csv,
}

impl ExportFormat {
    /// From a file extension; anything but `csv` is JSON.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ExportFormat::Csv,
            _ => ExportFormat::Json,
        }
    }
}

impl Stage1Model {
    pub fn skeleton(&self) -> Skeleton {
        match self.bpst.joints {
            22 => Skeleton::humanml3d(),
            _ => Skeleton::toy(),
        }
    }

    /// Decoded motion for a code sequence, `codes · rate` frames.
    pub fn codes_to_motion(&self, codes: &[usize]) -> Result<MotionSequence> {
        let frames = self.decode(codes)?;
        MotionSequence::new(frames, self.bpst.layout, self.skeleton(), TOY_FPS)
    }
}

pub fn export_motion(m: &MotionSequence, path: &Path, format: ExportFormat) -> Result<()> {
    match format {
        ExportFormat::Json => save_motion(m, path),
        ExportFormat::Csv => std::fs::write(path, motion_to_csv(m)).map_err(|e| Error::io(path, e)),
    }
}
