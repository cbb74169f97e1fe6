/** JSON shapes of the review-service HTTP API. */

export interface ClusterSummary {
  cluster_id: number;
  size: number;
  mean_confidence: number | null;
  min_confidence: number | null;
  name: string | null;
  top_labels: { label: string; count: number }[];
}

export interface ClusterItem {
  image_id: string;
  confidence: number;
  pseudo_label: string;
  effective_label: string;
  flagged: boolean;
  thumbnail_url: string;
}

export interface ItemsPage {
  cluster_id: number;
  page: number;
  page_size: number;
  total: number;
  items: ClusterItem[];
}

export type SortOrder = "confidence_asc" | "confidence_desc";

export type CorrectionAction = "relabel" | "move_to_cluster" | "flag_outlier";

export interface CorrectionRequest {
  image_id: string;
  action: CorrectionAction;
  label?: string;
  cluster_id?: number;
  annotator?: string;
}

export interface Ack {
  acknowledged: boolean;
  corrections?: number;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}
