/** Wire types of the search service API. */

export interface SearchGroupBody {
  factors: string[];
  colocated: boolean;
}

export interface SearchRequestBody {
  groups: SearchGroupBody[];
  limit?: number;
}

export interface SearchResult {
  image_id: string;
  score: number;
}

export interface HeatmapResponse {
  image_id: string;
  factor: string;
  width: number;
  height: number;
  /** Row-major activation values in [0, 1]. */
  values: number[];
}

export interface HealthResponse {
  status: string;
  images: number;
  factors: number;
}
