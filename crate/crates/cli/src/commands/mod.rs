pub mod calibrate;
pub mod cost;
pub mod simulate;
pub mod verify;
