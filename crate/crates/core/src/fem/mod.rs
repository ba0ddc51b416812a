//! Finite element machinery for Taylor-Hood Q2/Q1 on quadrilaterals.

pub mod assembly;
pub mod basis;
pub mod dirichlet;
pub mod quadrature;
pub mod space;
pub mod sparse;

pub use assembly::{
    assemble_convection, assemble_div, assemble_mass, assemble_rhs, assemble_stiffness, convection_action,
    integrate_squared, ConvectionForm,
};
pub use basis::{basis_eval, ElementKind};
pub use dirichlet::SaddleLayout;
pub use quadrature::Quadrature;
pub use space::{BoundaryNode, MixedSpace, QuadCache};
pub use sparse::{CsrMatrix, CsrPattern};
