//! Browser demo bindings; filled in alongside the static page.
