/* tslint:disable */
/* eslint-disable */

/**
 * One phantom and the component labeling of its annotation.
 */
export class Scene {
    free(): void;
    [Symbol.dispose](): void;
    component_count(): number;
    /**
     * Voxel count per component, largest first.
     */
    component_sizes(): Uint32Array;
    dims(): Uint32Array;
    constructor(seed: number, degrade: boolean, blur: boolean);
    /**
     * Relabels the annotation; returns the component count.
     */
    set_connectivity(c: number): number;
    /**
     * RGBA pixels of axial slice `z`, x to the right and y down. With
     * `overlay`, annotated voxels are tinted by component.
     */
    slice_rgba(z: number, overlay: boolean): Uint8Array;
}

/**
 * Scores `cases` phantoms whose early predictions are corrupted at
 * `rate` and `0.6 * rate`, and the final one at `0.3 * rate`, then ranks and
 * selects. Returns the records as JSON.
 */
export function stability_demo(seed: number, cases: number, rate: number, top_k: number, min_score: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scene_free: (a: number, b: number) => void;
    readonly scene_component_count: (a: number) => number;
    readonly scene_component_sizes: (a: number) => [number, number];
    readonly scene_dims: (a: number) => [number, number];
    readonly scene_new: (a: number, b: number, c: number) => [number, number, number];
    readonly scene_set_connectivity: (a: number, b: number) => [number, number, number];
    readonly scene_slice_rgba: (a: number, b: number, c: number) => [number, number];
    readonly stability_demo: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
