#![allow(dead_code)]
pub mod ctm_scalar;
pub mod oracle;
pub mod pha_oracle;
pub mod scenarios;
