// Typed client for the annotation service JSON contract.

export interface AuSchemaEntry {
  au_id: number;
  description: string;
}

export interface NextFrame {
  frame_id: string;
  image_url: string;
  au_schema: AuSchemaEntry[];
}

export interface LabelEntry {
  present: boolean;
  intensity?: number;
}

export interface AnnotationDoc {
  frame_id: string;
  annotator_id: string;
  labels: Record<string, LabelEntry>;
  submitted_at: string;
}

export interface Progress {
  annotators: Record<string, number>;
  total_frames: number;
  consolidated_frames: number;
}

export interface AssociationRow {
  au_id: number;
  category: string;
  present_count: number;
  denominator: number;
  percentage: number | null;
}

export interface AssociationTable {
  categories: string[];
  rows: AssociationRow[];
}

export interface SubmitResult {
  status: number; // 201 created, 200 updated
  doc: AnnotationDoc;
}

export class ApiError extends Error {
  constructor(readonly status: number, detail: string) {
    super(`API error ${status}: ${detail}`);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function errorDetail(response: Response): Promise<string> {
  try {
    const body = await response.json();
    return typeof body.detail === "string" ? body.detail : JSON.stringify(body.detail);
  } catch {
    return response.statusText;
  }
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async get(path: string): Promise<Response> {
    const response = await this.fetchImpl(this.baseUrl + path);
    if (!response.ok && response.status !== 204) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    return response;
  }

  /** Next unannotated frame for this annotator, or null when the queue is empty. */
  async nextFrame(annotator: string): Promise<NextFrame | null> {
    const response = await this.get(
      `/api/frames/next?annotator=${encodeURIComponent(annotator)}`,
    );
    if (response.status === 204) {
      return null;
    }
    return (await response.json()) as NextFrame;
  }

  async submit(payload: {
    frame_id: string;
    annotator_id: string;
    labels: Record<string, LabelEntry>;
  }): Promise<SubmitResult> {
    const response = await this.fetchImpl(`${this.baseUrl}/api/annotations`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    return { status: response.status, doc: (await response.json()) as AnnotationDoc };
  }

  async progress(): Promise<Progress> {
    return (await (await this.get("/api/progress")).json()) as Progress;
  }

  async association(): Promise<AssociationTable> {
    return (await (await this.get("/api/analysis/association")).json()) as AssociationTable;
  }

  imageUrl(frameId: string): string {
    return `${this.baseUrl}/api/frames/${encodeURIComponent(frameId)}/image`;
  }
}
