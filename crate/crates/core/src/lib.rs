pub mod apps;
pub mod bench;
pub mod body;
pub mod config;
pub mod control;
pub mod firewall;
pub mod gateway;
pub mod http;
pub mod ident;
pub mod portal;
pub mod principal;
pub mod registry;
pub mod rewrite;
pub mod route;
pub mod scheduler;
