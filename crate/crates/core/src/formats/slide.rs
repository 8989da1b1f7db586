use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{FormatError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preparation {
    #[default]
    #[serde(rename = "FFPE", alias = "ffpe")]
    Ffpe,
    Frozen,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Stain {
    #[default]
    #[serde(rename = "HE", alias = "he")]
    He,
    #[serde(rename = "other")]
    Other,
}

/// One slide entering the pipeline: a raster image plus its resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    pub patient_id: String,
    pub cohort_id: String,
    /// Microns per pixel at native resolution.
    pub mpp: f64,
    pub width_px: u32,
    pub height_px: u32,
    pub source_path: PathBuf,
    pub preparation: Preparation,
    pub stain: Stain,
}

impl SlideRecord {
    /// Slides with missing or implausible resolution are rejected here.
    pub fn validate(&self) -> Result<()> {
        if self.slide_id.is_empty() {
            return Err(FormatError::Invariant("slide_id is empty".into()));
        }
        if !(self.mpp.is_finite() && self.mpp > 0.0 && self.mpp < 10.0) {
            return Err(FormatError::Invariant(format!("slide {}: implausible mpp {}", self.slide_id, self.mpp)));
        }
        if self.width_px == 0 || self.height_px == 0 {
            return Err(FormatError::Invariant(format!(
                "slide {}: empty raster {}x{}",
                self.slide_id, self.width_px, self.height_px
            )));
        }
        Ok(())
    }

    /// Loads a slide from `<dir>/<slide_id>.png` (or `.tif`/`.tiff`) and its
    /// `<slide_id>.res.json` sidecar. Raster dimensions are read from the image
    /// header only.
    pub fn from_sidecar(sidecar_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(sidecar_path)?;
        let sidecar: ResolutionSidecar = serde_json::from_str(&text)?;
        let dir = sidecar_path.parent().unwrap_or_else(|| Path::new("."));
        let source_path = match &sidecar.image {
            Some(name) => dir.join(name),
            None => ["png", "tif", "tiff"]
                .iter()
                .map(|ext| dir.join(format!("{}.{ext}", sidecar.slide_id)))
                .find(|p| p.exists())
                .ok_or_else(|| FormatError::Invariant(format!("no raster found for slide {}", sidecar.slide_id)))?,
        };
        let (width_px, height_px) = image::image_dimensions(&source_path)
            .map_err(|e| FormatError::Malformed(format!("{}: {e}", source_path.display())))?;
        let record = SlideRecord {
            slide_id: sidecar.slide_id,
            patient_id: sidecar.patient_id,
            cohort_id: sidecar.cohort_id,
            mpp: sidecar.mpp,
            width_px,
            height_px,
            source_path,
            preparation: sidecar.preparation,
            stain: sidecar.stain,
        };
        record.validate()?;
        Ok(record)
    }
}

/// Contents of `<slide_id>.res.json`, the stand-in for scanner metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionSidecar {
    pub slide_id: String,
    pub patient_id: String,
    pub cohort_id: String,
    pub mpp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default)]
    pub preparation: Preparation,
    #[serde(default)]
    pub stain: Stain,
}

impl fmt::Display for Preparation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preparation::Ffpe => "FFPE",
            Preparation::Frozen => "frozen",
            Preparation::Other => "other",
        })
    }
}

impl FromStr for Preparation {
    type Err = FormatError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FFPE" | "ffpe" => Ok(Preparation::Ffpe),
            "frozen" => Ok(Preparation::Frozen),
            "other" => Ok(Preparation::Other),
            _ => Err(FormatError::Malformed(format!("unknown preparation `{s}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(mpp: f64) -> SlideRecord {
        SlideRecord {
            slide_id: "S1".into(),
            patient_id: "P1".into(),
            cohort_id: "C".into(),
            mpp,
            width_px: 10,
            height_px: 10,
            source_path: "S1.png".into(),
            preparation: Preparation::Ffpe,
            stain: Stain::He,
        }
    }

    #[test]
    fn implausible_mpp_is_rejected() {
        assert!(record(0.5).validate().is_ok());
        for bad in [0.0, -0.5, 10.0, 25.0, f64::NAN] {
            assert!(record(bad).validate().is_err(), "mpp {bad}");
        }
    }

    #[test]
    fn sidecar_defaults_to_ffpe_he() {
        let s: ResolutionSidecar =
            serde_json::from_str(r#"{"slide_id":"a","patient_id":"p","cohort_id":"c","mpp":0.5}"#).unwrap();
        assert_eq!(s.preparation, Preparation::Ffpe);
        assert_eq!(s.stain, Stain::He);
    }
}
