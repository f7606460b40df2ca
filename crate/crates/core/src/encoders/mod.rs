//! Style and content encoders for audio, motion and speaker identity.

mod audio;
mod identity;
mod motion;
mod style;

pub use audio::{AudioContentEncoder, AudioStyleEncoder, ConvFrontend, SpeechFrontend};
pub use identity::{IdentityEncoder, IdentityLabel};
pub use motion::{ConvStack, MotionContentEncoder, MotionContentTrace, MotionStyleEncoder};
pub use style::{fuse_style_tensors, fuse_styles, StyleCode, StyleSource};
