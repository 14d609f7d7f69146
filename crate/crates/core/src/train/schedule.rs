use crate::error::{Error, Result};

pub const POLY_POWER: f64 = 0.9;

/// Polynomial decay `alpha0 * (1 - epoch / total_epochs)^0.9`, defined for
/// `0 <= epoch <= total_epochs`.
pub fn lr_schedule(epoch: usize, alpha0: f64, total_epochs: usize) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::invalid("lr_schedule", "total_epochs must be >= 1"));
    }
    if epoch > total_epochs {
        return Err(Error::invalid(
            "lr_schedule",
            format!("epoch {epoch} outside 0..={total_epochs}"),
        ));
    }
    Ok(alpha0 * (1.0 - epoch as f64 / total_epochs as f64).powf(POLY_POWER))
}
