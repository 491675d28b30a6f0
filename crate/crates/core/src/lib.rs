//! Risk-bounded trajectory planning for polynomial systems with
//! non-Gaussian uncertainty, via exact moment propagation and
//! distribution-free chance-constraint bounds.

pub mod expr;
pub mod mc;
pub mod nlp;
pub mod propagation;
pub mod quadrature;
pub mod risk;
pub mod rv;
pub mod scenario;
