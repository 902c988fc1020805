//! Holds the `acceptance` test target, which runs after every other suite in
//! the workspace. See `tests/acceptance.rs`.
