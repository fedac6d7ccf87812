/* tslint:disable */
/* eslint-disable */

/**
 * Forced alignment of a toy similarity matrix under a timestamp bias.
 */
export function align(request_json: string): string;

/**
 * Angle bin (0–11) of a relative heading.
 */
export function angle_bin(angle_deg: number): number;

/**
 * Template for a hand-written route: each step is a pano with optional
 * named landmarks and the bearing to the next pano.
 */
export function encode_route(request_json: string): string;

/**
 * Equirectangular box of a perspective view, plus the view recovered from
 * that box.
 */
export function project_view(heading_deg: number, pitch_deg: number, hfov_deg: number, vfov_deg: number, width: number, height: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly align: (a: number, b: number) => [number, number, number, number];
    readonly angle_bin: (a: number) => number;
    readonly encode_route: (a: number, b: number) => [number, number, number, number];
    readonly project_view: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
