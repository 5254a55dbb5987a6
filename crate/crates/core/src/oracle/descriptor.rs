use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ImageShape, NormalizationSpec};

/// Sidecar JSON describing how an exported model expects its input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessingDescriptor {
    pub input_name: String,
    pub output_name: String,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// `[height, width]`
    pub input_size: [usize; 2],
}

impl PreprocessingDescriptor {
    pub fn from_json(text: &str) -> Result<Self> {
        let desc: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("preprocessing descriptor: {e}")))?;
        desc.validate()?;
        Ok(desc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_name.is_empty() || self.output_name.is_empty() {
            return Err(Error::Config("input_name and output_name must be non-empty".into()));
        }
        if self.input_size.contains(&0) {
            return Err(Error::Config(format!("input_size must be positive, got {:?}", self.input_size)));
        }
        NormalizationSpec::<f64>::from_f64(self.mean, self.std).map(|_| ())
    }

    pub fn normalization<T: Scalar>(&self) -> Result<NormalizationSpec<T>> {
        NormalizationSpec::from_f64(self.mean, self.std)
    }

    pub fn input_shape(&self) -> ImageShape {
        ImageShape::rgb(self.input_size[0], self.input_size[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_descriptor() {
        let d = PreprocessingDescriptor::from_json(
            r#"{"input_name":"input","output_name":"logits","mean":[0.485,0.456,0.406],
                "std":[0.229,0.224,0.225],"input_size":[224,224]}"#,
        )
        .unwrap();
        assert_eq!(d.input_shape(), ImageShape::rgb(224, 224));
        assert_eq!(d.normalization::<f32>().unwrap().std[1], 0.224);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_std() {
        assert!(PreprocessingDescriptor::from_json(
            r#"{"input_name":"a","output_name":"b","mean":[0,0,0],"std":[1,1,1],"input_size":[2,2],"extra":1}"#
        )
        .is_err());
        assert!(PreprocessingDescriptor::from_json(
            r#"{"input_name":"a","output_name":"b","mean":[0,0,0],"std":[1,0,1],"input_size":[2,2]}"#
        )
        .is_err());
    }
}
