/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_scene_free: (a: number, b: number) => void;
export const scene_component_count: (a: number) => number;
export const scene_component_sizes: (a: number) => [number, number];
export const scene_dims: (a: number) => [number, number];
export const scene_new: (a: number, b: number, c: number) => [number, number, number];
export const scene_set_connectivity: (a: number, b: number) => [number, number, number];
export const scene_slice_rgba: (a: number, b: number, c: number) => [number, number];
export const stability_demo: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
