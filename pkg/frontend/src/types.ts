/** Wire types for the rgbdvit teaching service. */

export interface FusionInfo {
  mode: string;
  late_op?: string | null;
  base?: Record<string, unknown>;
}

export interface HealthInfo {
  status: string;
  fingerprint: string;
  fusion: FusionInfo;
  encoding: string;
  feature_width: number;
  sessions: number;
}

export interface SessionHandle {
  session_id: string;
  fingerprint: string;
}

export interface CategoryInfo {
  label: string;
  category_id: number;
  support_size: number;
}

export interface SessionState {
  session_id: string;
  categories: CategoryInfo[];
  support_size: number;
  /** graded-correction accuracy over answered asks, null before any */
  gca: number | null;
  event_count: number;
  last_seq: number;
  fingerprint: string;
  encoding: string;
  k: number;
}

export interface TeachResult {
  event: number;
  label: string;
  category_id: number;
  new_category: boolean;
  support_size: number;
}

export interface AskResult {
  event: number;
  /** "unknown" when the session has an empty support set */
  predicted: string;
  scores: Record<string, number>;
  latency_ms: number;
}

export interface CorrectResult {
  event: number;
  label: string;
  category_id: number;
  support_size: number;
}

/** One entry of the session event stream (feature payloads stripped). */
export interface SessionEvent {
  seq: number;
  kind: "teach" | "ask" | "correct";
  label?: string;
  predicted?: string;
  scores?: Record<string, number>;
  ask_seq?: number;
  support_size?: number;
  new_category?: boolean;
  tag?: string | null;
  latency_ms?: number;
  [extra: string]: unknown;
}

export const UNKNOWN_LABEL = "unknown";
