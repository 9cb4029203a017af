use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::path::{Path, PathBuf};

use super::GatewayError;

pub const MEDIA_TYPES: [&str; 3] = ["image/png", "image/jpeg", "image/webp"];

/// An image handed to a model: a local file, a remote URL, or inline bytes.
///
/// Serialized as a single string: the path, the URL, or a
/// `data:<media>;base64,<payload>` URL.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ImageRef {
    Path(PathBuf),
    Url(String),
    Inline { media_type: String, data: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ImageRefError {
    #[error("unsupported media type {0:?}")]
    MediaType(String),
    #[error("inline image payload is empty")]
    EmptyPayload,
    #[error("malformed data URL: {0}")]
    DataUrl(String),
}

impl ImageRef {
    pub fn inline(media_type: &str, data: Vec<u8>) -> Result<Self, ImageRefError> {
        if !MEDIA_TYPES.contains(&media_type) {
            return Err(ImageRefError::MediaType(media_type.to_string()));
        }
        if data.is_empty() {
            return Err(ImageRefError::EmptyPayload);
        }
        Ok(ImageRef::Inline {
            media_type: media_type.to_string(),
            data,
        })
    }

    pub fn parse(s: &str) -> Result<Self, ImageRefError> {
        if let Some(rest) = s.strip_prefix("data:") {
            let (meta, payload) = rest
                .split_once(',')
                .ok_or_else(|| ImageRefError::DataUrl("missing ','".into()))?;
            let media_type = meta
                .strip_suffix(";base64")
                .ok_or_else(|| ImageRefError::DataUrl("only base64 payloads are supported".into()))?;
            let data = STANDARD
                .decode(payload.trim())
                .map_err(|e| ImageRefError::DataUrl(e.to_string()))?;
            return ImageRef::inline(media_type, data);
        }
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(ImageRef::Url(s.to_string()));
        }
        Ok(ImageRef::Path(PathBuf::from(s)))
    }

    /// Form sent over the wire: URLs pass through, everything else becomes a
    /// base64 data URL. Reads the file for `Path` references.
    pub fn to_wire_url(&self) -> Result<String, GatewayError> {
        match self {
            ImageRef::Url(u) => Ok(u.clone()),
            ImageRef::Inline { media_type, data } => Ok(data_url(media_type, data)),
            ImageRef::Path(p) => {
                let media_type = media_type_for(p)
                    .ok_or_else(|| GatewayError::InvalidRequest(format!("cannot infer media type of {}", p.display())))?;
                let data = std::fs::read(p)
                    .map_err(|e| GatewayError::InvalidRequest(format!("reading {}: {e}", p.display())))?;
                if data.is_empty() {
                    return Err(GatewayError::InvalidRequest(format!("{} is empty", p.display())));
                }
                Ok(data_url(media_type, &data))
            }
        }
    }

    pub fn bytes(&self) -> Option<&[u8]> {
        match self {
            ImageRef::Inline { data, .. } => Some(data),
            _ => None,
        }
    }
}

fn data_url(media_type: &str, data: &[u8]) -> String {
    format!("data:{media_type};base64,{}", STANDARD.encode(data))
}

pub fn media_type_for(path: &Path) -> Option<&'static str> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "png" => Some("image/png"),
        "jpg" | "jpeg" => Some("image/jpeg"),
        "webp" => Some("image/webp"),
        _ => None,
    }
}

pub fn extension_for(media_type: &str) -> &'static str {
    match media_type {
        "image/jpeg" => "jpg",
        "image/webp" => "webp",
        _ => "png",
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageRef::Path(p) => write!(f, "{}", p.display()),
            ImageRef::Url(u) => f.write_str(u),
            ImageRef::Inline { media_type, data } => f.write_str(&data_url(media_type, data)),
        }
    }
}

impl Serialize for ImageRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ImageRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ImageRef::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_forms() {
        assert_eq!(ImageRef::parse("imgs/a.png").unwrap(), ImageRef::Path("imgs/a.png".into()));
        assert_eq!(
            ImageRef::parse("https://x/y.jpg").unwrap(),
            ImageRef::Url("https://x/y.jpg".into())
        );
        let inline = ImageRef::parse("data:image/webp;base64,AAEC").unwrap();
        assert_eq!(inline.bytes(), Some(&[0u8, 1, 2][..]));
        assert_eq!(inline.to_string(), "data:image/webp;base64,AAEC");
    }

    #[test]
    fn inline_invariants() {
        assert_eq!(
            ImageRef::parse("data:image/gif;base64,AAEC"),
            Err(ImageRefError::MediaType("image/gif".into()))
        );
        assert_eq!(ImageRef::parse("data:image/png;base64,"), Err(ImageRefError::EmptyPayload));
        assert!(matches!(ImageRef::parse("data:image/png,abc"), Err(ImageRefError::DataUrl(_))));
        assert!(matches!(ImageRef::parse("data:image/png;base64,@@"), Err(ImageRefError::DataUrl(_))));
    }

    #[test]
    fn path_is_read_into_data_url() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jpeg");
        std::fs::write(&p, [9u8, 9]).unwrap();
        let url = ImageRef::Path(p).to_wire_url().unwrap();
        assert_eq!(url, "data:image/jpeg;base64,CQk=");
        assert!(ImageRef::Path(dir.path().join("x.bmp")).to_wire_url().is_err());
    }
}
