//! Executable oracles for the structural theorems.
